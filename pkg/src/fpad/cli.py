"""Command-line entry point.

Subcommands: synth, train (global | local-pretext | local), infer, eval,
cam. A JSON run configuration provides paths and hyperparameters; the
shared flags --config/--seed/--out/--arch/--weights/--protocol override
it. Exit status: 0 success, 1 validation problem, 2 runtime failure.
Outputs land only under the configured output directory, and every
command drops a metadata file recording its seeds and conventions.
"""

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_image,
    write_dataset,
)
from .errors import ConfigError, DependencyError, FpadError, ValidationError
from .evaluation import (
    ProtocolCell,
    check_protocol,
    evaluate_scores,
    run_protocol,
    summarize,
)
from .localization import activation_pair, extract_map_patch, save_map_binary
from .scoring import (
    DEFAULT_WEIGHTS,
    check_weights,
    predict_batch,
    read_score_file,
    write_score_file,
)
from .training import (
    TrainConfig,
    collect_training_patches,
    finetune_local,
    pretrain_local_inpainting,
    train_global,
)
from .transforms import CutoutConfig, ShuffleConfig

INTERPOLATION_NOTE = "bilinear, align_corners off"

_TOP_LEVEL_KEYS = {
    "manifest",
    "out",
    "arch",
    "seed",
    "weights",
    "protocol",
    "train",
    "cutout",
    "shuffle",
    "synth",
    "patches_per_image",
    "checkpoints",
    "cells",
    "threshold",
}


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {p}: {e}") from e
    unknown = set(doc) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _section(doc, key, cls, **extra):
    raw = dict(doc.get(key, {}))
    raw.update(extra)
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
    if "train_materials" in raw and isinstance(raw["train_materials"], list):
        raw["train_materials"] = tuple(raw["train_materials"])
    return cls(**raw)


def _parse_weights(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--weights expects three comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"--weights values must be numbers: {text!r}") from e


class Run:
    """Resolved run settings: defaults, then config file, then flags."""

    def __init__(self, args):
        doc = _load_config_file(getattr(args, "config", None))
        self.doc = doc
        self.manifest = getattr(args, "manifest", None) or doc.get("manifest")
        self.out = Path(getattr(args, "out", None) or doc.get("out") or "runs/out")
        self.arch = getattr(args, "arch", None) or doc.get("arch") or "tiny"
        seed_flag = getattr(args, "seed", None)
        self.seed = int(seed_flag if seed_flag is not None else doc.get("seed", 0))
        weights_flag = getattr(args, "weights", None)
        if weights_flag is not None:
            self.weights = check_weights(_parse_weights(weights_flag))
        else:
            self.weights = check_weights(tuple(doc.get("weights", DEFAULT_WEIGHTS)))
        self.protocol = getattr(args, "protocol", None) or doc.get("protocol")
        self.threshold = float(doc.get("threshold", 0.5))
        self.patches_per_image = int(doc.get("patches_per_image", 70))
        self.train_cfg = _section(doc, "train", TrainConfig, seed=self.seed, arch_id=self.arch)
        self.cutout_cfg = _section(doc, "cutout", CutoutConfig)
        self.shuffle_cfg = _section(doc, "shuffle", ShuffleConfig)
        ckpts = doc.get("checkpoints", {})
        base = self.out / "checkpoints"
        self.ckpt_global = Path(ckpts.get("global", base / "global"))
        self.ckpt_pretext = Path(ckpts.get("pretext", base / "pretext"))
        self.ckpt_local = Path(ckpts.get("local", base / "local"))

    def load_split(self):
        if not self.manifest:
            raise ConfigError("a dataset manifest is required (--manifest or config)")
        return load_dataset(self.manifest)

    def write_metadata(self, command, **extra):
        self.out.mkdir(parents=True, exist_ok=True)
        meta = {
            "command": command,
            "seed": self.seed,
            "arch": self.arch,
            "weights": list(self.weights),
            "interpolation": INTERPOLATION_NOTE,
            "config": self.doc,
        }
        meta.update(extra)
        path = self.out / f"metadata-{command}.json"
        path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))


def cmd_synth(args):
    run = Run(args)
    synth_cfg = _section(
        run.doc,
        "synth",
        SynthConfig,
        **{
            k: v
            for k, v in {
                "n_live": args.live,
                "n_spoof": args.spoof,
                "image_size": args.image_size,
                "sensor": args.sensor,
            }.items()
            if v is not None
        },
    )
    split = generate_synthetic(synth_cfg, seed=run.seed)
    manifest = write_dataset(split, run.out)
    run.write_metadata("synth", synth=asdict(synth_cfg), manifest=str(manifest))
    n = len(split.train) + len(split.validation) + len(split.test)
    print(f"wrote {n} samples, manifest {manifest}")
    return 0


def _save_training_outputs(run, stage, model, report, ckpt_dir, best_metrics):
    save_checkpoint(ckpt_dir, model, epoch=report.best_epoch, seed=run.seed, metrics=best_metrics)
    report.checkpoint_path = str(ckpt_dir)
    (Path(ckpt_dir) / "train_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True)
    )
    run.write_metadata(f"train-{stage}", checkpoint=str(ckpt_dir))
    print(f"checkpoint {ckpt_dir}")


def cmd_train(args):
    run = Run(args)
    split = run.load_split()
    stage = args.stage
    if stage == "global":
        model, report = train_global(split, run.train_cfg, run.cutout_cfg)
        metrics = report.epochs[report.best_epoch - 1] if report.best_epoch else {}
        _save_training_outputs(run, stage, model, report, run.ckpt_global, metrics)
    elif stage == "local-pretext":
        rng = np.random.default_rng(run.seed)
        patches, _ = collect_training_patches(
            split.train, n_per_image=run.patches_per_image, seed=int(rng.integers(0, 2 ** 31))
        )
        model, _decoder, report = pretrain_local_inpainting(
            patches, run.train_cfg, run.shuffle_cfg
        )
        last = report.step_losses[-1] if report.step_losses else None
        _save_training_outputs(
            run, stage, model, report, run.ckpt_pretext, {"final_step_loss": last}
        )
    elif stage == "local":
        if not (run.ckpt_pretext / "manifest.json").exists():
            raise DependencyError(
                f"pretext checkpoint not found at {run.ckpt_pretext}; "
                f"run `fpad train local-pretext` first"
            )
        pretrained, _ = load_checkpoint(run.ckpt_pretext, expect_arch=run.arch)
        rng = np.random.default_rng(run.seed)
        patches, labels = collect_training_patches(
            split.train, n_per_image=run.patches_per_image, seed=int(rng.integers(0, 2 ** 31))
        )
        val_patches, val_labels = collect_training_patches(
            split.validation, n_per_image=run.patches_per_image,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        model, report = finetune_local(
            pretrained, patches, labels, run.train_cfg,
            val_patches=val_patches, val_labels=val_labels,
        )
        metrics = report.epochs[report.best_epoch - 1] if report.best_epoch else {}
        _save_training_outputs(run, stage, model, report, run.ckpt_local, metrics)
    else:
        raise ConfigError(f"unknown train stage {stage!r}")
    return 0


def _load_model_pair(run):
    for name, path in (("global", run.ckpt_global), ("local", run.ckpt_local)):
        if not (Path(path) / "manifest.json").exists():
            raise DependencyError(f"{name} checkpoint not found at {path}")
    gf, _ = load_checkpoint(run.ckpt_global)
    lf, _ = load_checkpoint(run.ckpt_local)
    return gf, lf


def cmd_infer(args):
    run = Run(args)
    split = run.load_split()
    if run.protocol:
        check_protocol(split, run.protocol)
    gf, lf = _load_model_pair(run)
    samples = split.test
    if not samples:
        raise ConfigError("test split is empty; nothing to score")
    results = predict_batch(samples, gf, lf, run.weights)
    score_path = run.out / "scores.jsonl"
    write_score_file(score_path, samples, results)
    run.write_metadata("infer", scores=str(score_path), n_samples=len(samples))
    print(f"scores {score_path}")
    labels = [s.label for s in samples]
    if 0 in labels and 1 in labels:
        report = evaluate_scores(
            [r.fused_score for r in results], labels,
            threshold=run.threshold * sum(run.weights),
        )
        print(
            f"test ace {report.ace_percent:.2f} "
            f"tdr_at_fdr1 {report.tdr_at_fdr1_percent:.2f}"
        )
    return 0


def _single_cell_report(records, protocol, threshold):
    labels = [r["label"] for r in records]
    if any(lab is None for lab in labels):
        raise ConfigError("score file records need labels for evaluation")
    scores = [r["fy"] for r in records]
    sensors = sorted({r.get("sensor", "") for r in records})
    report = evaluate_scores(
        scores, labels, threshold=threshold, protocol=protocol or "",
        test_sensor=sensors[0] if len(sensors) == 1 else "",
    )
    return report


def cmd_eval(args):
    run = Run(args)
    if run.protocol and run.manifest:
        check_protocol(run.load_split(), run.protocol)
    cells_cfg = run.doc.get("cells")
    threshold = run.threshold * sum(run.weights)
    if args.scores:
        records = read_score_file(args.scores)
        report = _single_cell_report(records, run.protocol, threshold)
        doc = {
            "protocol": run.protocol or "",
            "cells": [report.to_dict()],
            "summary": summarize([report]),
        }
    elif cells_cfg:
        cells = []
        for cell in cells_cfg:
            for key in ("train_sensor", "test_sensor", "scores"):
                if key not in cell:
                    raise ConfigError(f"protocol cell missing {key!r}: {cell}")
            records = read_score_file(cell["scores"])
            labels = [r["label"] for r in records]
            if any(lab is None for lab in labels):
                raise ConfigError(f"score file {cell['scores']} records need labels")
            cells.append(
                ProtocolCell(
                    train_sensor=cell["train_sensor"],
                    test_sensor=cell["test_sensor"],
                    scores=[r["fy"] for r in records],
                    labels=labels,
                )
            )
        doc = run_protocol(run.protocol or "cross-sensor", cells, threshold=threshold)
    else:
        raise ConfigError("eval needs --scores FILE or config 'cells'")

    run.out.mkdir(parents=True, exist_ok=True)
    report_path = run.out / "eval_report.json"
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    run.write_metadata("eval", report=str(report_path), threshold=threshold)
    if args.csv:
        _write_csv(run.out / "eval_report.csv", doc)
    if args.roc:
        _write_roc_png(run.out / "roc.png", doc)
    s = doc["summary"]
    print(f"report {report_path}")
    print(
        f"ace {s['ace_mean']:.2f} +- {s['ace_sd']:.2f} "
        f"tdr_at_fdr1 {s['tdr_mean']:.2f} +- {s['tdr_sd']:.2f}"
    )
    return 0


def _write_csv(path, doc):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["train_sensor", "test_sensor", "ace_percent", "tdr_at_fdr1_percent"])
        for cell in doc["cells"]:
            writer.writerow(
                [
                    cell["train_sensor"],
                    cell["test_sensor"],
                    f"{cell['ace_percent']:.4f}",
                    f"{cell['tdr_at_fdr1_percent']:.4f}",
                ]
            )
        s = doc["summary"]
        writer.writerow(
            [
                "mean +- s.d.",
                "",
                f"{s['ace_mean']:.4f} +- {s['ace_sd']:.4f}",
                f"{s['tdr_mean']:.4f} +- {s['tdr_sd']:.4f}",
            ]
        )


def _write_roc_png(path, doc):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for cell in doc["cells"]:
        points = cell["roc"]
        fdr = [p[0] for p in points]
        tdr = [p[1] for p in points]
        label = f"{cell['train_sensor']}->{cell['test_sensor']}".strip("->") or "cell"
        ax.plot(fdr, tdr, drawstyle="steps-post", label=label)
    ax.set_xlabel("false detection rate (%)")
    ax.set_ylabel("true detection rate (%)")
    ax.set_xscale("symlog", linthresh=1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _overlay_png(image, values, path):
    from matplotlib import cm

    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    heat = cm.viridis(norm)[..., :3]
    gray = np.repeat(image[..., None], 3, axis=2)
    blend = 0.5 * gray + 0.5 * heat
    from PIL import Image

    Image.fromarray(np.clip(np.round(blend * 255.0), 0, 255).astype(np.uint8)).save(path)


def _save_patch_png(patch, path):
    from PIL import Image

    arr = np.clip(np.round(patch.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def cmd_cam(args):
    run = Run(args)
    if not (run.ckpt_global / "manifest.json").exists():
        raise DependencyError(f"global checkpoint not found at {run.ckpt_global}")
    model, _ = load_checkpoint(run.ckpt_global)
    image = load_image(args.image)
    source_id = Path(args.image).stem
    spoof_map, live_map = activation_pair(model, image)
    run.out.mkdir(parents=True, exist_ok=True)

    # Artifact naming: the map from the spoof-probability gradient is the
    # "L-CAM" file, its complement the "S-CAM" file, matching the score
    # file's ly_l/ly_s pairing.
    for amap, stem, kind in ((spoof_map, "lcam", "L-CAM"), (live_map, "scam", "S-CAM")):
        save_map_binary(amap, run.out / f"{stem}.bin", run.out / f"{stem}.json")
        sidecar = json.loads((run.out / f"{stem}.json").read_text())
        sidecar.update(
            {
                "height": int(amap.values.shape[0]),
                "width": int(amap.values.shape[1]),
                "kind": kind,
                "source_id": source_id,
            }
        )
        (run.out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        _overlay_png(image, amap.values, run.out / f"{stem}_overlay.png")

    patch_sp = extract_map_patch(image, spoof_map, source_id=source_id)
    patch_lv = extract_map_patch(image, live_map, source_id=source_id)
    _save_patch_png(patch_sp, run.out / "l_patch.png")
    _save_patch_png(patch_lv, run.out / "s_patch.png")
    run.write_metadata(
        "cam",
        image=str(args.image),
        l_patch_origin=list(patch_sp.origin),
        s_patch_origin=list(patch_lv.origin),
        spoof_probability=spoof_map.spoof_probability,
    )
    print(f"maps and patches under {run.out}")
    return 0


def _add_shared_flags(p, out_required=False):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--arch", choices=["reference-large", "tiny"], help="architecture")
    p.add_argument("--weights", help="fusion weights wg,wl,ws")
    p.add_argument("--protocol", choices=["cross-material", "cross-sensor"])
    p.add_argument("--manifest", help="dataset manifest path")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fpad",
        description="Fingerprint presentation attack detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_shared_flags(p)
    p.add_argument("--live", type=int, help="live samples in the train pool")
    p.add_argument("--spoof", type=int, help="spoof samples in the train pool")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--sensor", help="sensor name baked into the rendering")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model stage")
    p.add_argument("stage", choices=["global", "local-pretext", "local"])
    _add_shared_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score the test split and write a score file")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics and protocol reports from score files")
    _add_shared_flags(p)
    p.add_argument("--scores", help="score file (JSON lines)")
    p.add_argument("--csv", action="store_true", help="also write a CSV table")
    p.add_argument("--roc", action="store_true", help="also render the ROC as PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="export activation maps and patches for one image")
    _add_shared_flags(p)
    p.add_argument("--image", required=True, help="grayscale PNG to explain")
    p.set_defaults(func=cmd_cam)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FpadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # keep the promised exit contract for any failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
