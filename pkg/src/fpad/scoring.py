"""Test-stage pipeline: global score, localization, local scores, fusion.

For one capture the whole-image classifier produces a spoof probability
and, through its feature-tap gradients, two activation maps. Each map
nominates one 96x96 patch; the patch-level classifier scores both, and
the three spoofness scores are combined as a weighted sum. No
training-time transform (masking, shuffling, augmentation) runs here.

Score files are JSON lines, one record per sample:
    {"id", "label"?, "sensor", "material"?, "gy_p", "ly_l", "ly_s", "fy"}
where gy_p is the whole-image score, ly_l / ly_s are the patch scores
from the spoof-evidence and live-evidence maps, and fy is the fusion.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import spoofness, to_input
from .dataset import PATCH_SIZE
from .errors import ConfigError, ScoringError, ShapeError
from .localization import activation_pair, extract_map_patch

DEFAULT_WEIGHTS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

DECISION_THRESHOLD = 0.5


@dataclass
class FusionResult:
    """Per-sample scores; weights order is (global, spoof-map patch, live-map patch)."""

    global_score: float
    spoof_patch_score: float
    live_patch_score: float
    fused_score: float
    spoof_patch_origin: tuple
    live_patch_origin: tuple
    weights: tuple
    sample_id: str = ""

    @property
    def is_spoof_call(self):
        return self.fused_score > DECISION_THRESHOLD * sum(self.weights)


def check_weights(weights):
    if len(weights) != 3:
        raise ConfigError(f"need three fusion weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ConfigError(f"fusion weights must be nonnegative, got {weights}")
    return tuple(float(w) for w in weights)


def fuse_scores(global_score, spoof_patch_score, live_patch_score, weights=DEFAULT_WEIGHTS):
    """Weighted sum of the three sub-scores; weights need not sum to one."""
    w_g, w_sp, w_lv = check_weights(weights)
    return w_g * global_score + w_sp * spoof_patch_score + w_lv * live_patch_score


def predict(sample, global_model, local_model, weights=DEFAULT_WEIGHTS):
    """Score one sample through the full global-then-local pipeline."""
    weights = check_weights(weights)
    img = sample.image
    if img.shape[0] < PATCH_SIZE or img.shape[1] < PATCH_SIZE:
        raise ScoringError(
            f"sample {sample.id}: image {img.shape} cannot host a "
            f"{PATCH_SIZE}x{PATCH_SIZE} patch"
        )
    try:
        spoof_map, live_map = activation_pair(global_model, img)
        patch_sp = extract_map_patch(img, spoof_map, source_id=sample.id)
        patch_lv = extract_map_patch(img, live_map, source_id=sample.id)
    except ShapeError as e:
        raise ScoringError(f"sample {sample.id}: {e}") from e
    with torch.no_grad():
        x = to_input([patch_sp.pixels, patch_lv.pixels], local_model.input_size)
        probs = spoofness(local_model(x))
    g = float(spoof_map.spoof_probability)
    sp = float(probs[0].item())
    lv = float(probs[1].item())
    return FusionResult(
        global_score=g,
        spoof_patch_score=sp,
        live_patch_score=lv,
        fused_score=fuse_scores(g, sp, lv, weights),
        spoof_patch_origin=patch_sp.origin,
        live_patch_origin=patch_lv.origin,
        weights=weights,
        sample_id=sample.id,
    )


def predict_batch(samples, global_model, local_model, weights=DEFAULT_WEIGHTS):
    """Order-preserving elementwise predict over a nonempty collection."""
    samples = list(samples)
    if not samples:
        raise ScoringError("predict_batch needs at least one sample")
    results = []
    for s in samples:
        try:
            results.append(predict(s, global_model, local_model, weights))
        except ScoringError:
            raise
        except Exception as e:
            raise ScoringError(f"while scoring sample {s.id}: {e}") from e
    return results


def write_score_file(path, samples, results):
    """Write one JSON line per (sample, result) pair."""
    if len(samples) != len(results):
        raise ScoringError(
            f"samples and results differ in length: {len(samples)} vs {len(results)}"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s, r in zip(samples, results):
            record = {
                "id": s.id,
                "label": "spoof" if s.label == 1 else "live",
                "sensor": s.sensor,
                "material": s.material,
                "gy_p": r.global_score,
                "ly_l": r.spoof_patch_score,
                "ly_s": r.live_patch_score,
                "fy": r.fused_score,
            }
            f.write(json.dumps(record) + "\n")
    return path


def read_score_file(path):
    """Parse a score file back into a list of dict records.

    Labels come back as ints (0 live, 1 spoof) when present, else None.
    """
    path = Path(path)
    if not path.exists():
        raise ScoringError(f"score file not found: {path}")
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ScoringError(f"{path}:{ln}: invalid JSON record: {e}") from e
            for key in ("id", "gy_p", "ly_l", "ly_s", "fy"):
                if key not in rec:
                    raise ScoringError(f"{path}:{ln}: record missing {key!r}")
            label = rec.get("label")
            if label is not None:
                label = 1 if label in (1, "1", "spoof") else 0
            rec["label"] = label
            records.append(rec)
    if not records:
        raise ScoringError(f"score file is empty: {path}")
    return records
