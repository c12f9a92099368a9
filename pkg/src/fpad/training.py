"""Training procedures: global classifier, in-painting pretext, local fine-tune.

The global classifier trains on whole images that pass through the
zero-masking transform and then augmentation. The local classifier is
first pretrained to in-paint pixel-shuffled patch windows through the
decoder (both sets of parameters update together), then fine-tuned with
cross-entropy on labeled ROI patches starting from a copy of the
pretext weights. All three are deterministic under fixed seeds and
select the best validation checkpoint when a validation set exists.

Progress goes to stdout as: ``epoch <k> train_loss <x> val_ace <y>``.
"""

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import (
    build_classifier,
    build_decoder,
    classification_loss,
    perceptual_loss,
    reconstruction_loss,
    spoofness,
    to_input,
)
from .dataset import augment, extract_roi_patches, sample_training_patches
from .errors import MetricError, TrainingError
from .evaluation import ace
from .transforms import CutoutConfig, ShuffleConfig, cutout, pixel_shuffle


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    arch_id: str = "tiny"
    # pretext loss mix and step cap (None = run all epochs)
    perceptual_weight: float = 1.0
    pixel_weight: float = 1.0
    max_steps: int | None = None

    def validate(self):
        if self.learning_rate <= 0:
            raise TrainingError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # {"epoch", "train_loss", "val_loss", "val_ace"}
    step_losses: list = field(default_factory=list)  # pretext only
    wall_seconds: float = 0.0
    checkpoint_path: str = ""
    best_epoch: int = 0
    param_count: int = 0  # informative only

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "step_losses": self.step_losses,
            "wall_seconds": self.wall_seconds,
            "checkpoint_path": self.checkpoint_path,
            "best_epoch": self.best_epoch,
            "param_count": self.param_count,
        }


def _check_two_classes(labels, what):
    labels = np.asarray(labels)
    if labels.size == 0 or (labels == 0).sum() == 0 or (labels == 1).sum() == 0:
        raise TrainingError(f"{what} must contain both classes")


def _adam(params, cfg):
    return torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )


def _batched(indices, batch_size):
    for i in range(0, len(indices), batch_size):
        yield indices[i:i + batch_size]


def _evaluate_classifier(model, images, labels, batch_size=32):
    """(mean loss, ACE at 0.5) without gradient tracking."""
    scores = []
    loss_total, n = 0.0, 0
    with torch.no_grad():
        for chunk in _batched(list(range(len(images))), batch_size):
            x = to_input([images[i] for i in chunk], model.input_size)
            y = torch.tensor([labels[i] for i in chunk])
            p = spoofness(model(x))
            loss_total += float(classification_loss(p, y).item()) * len(chunk)
            n += len(chunk)
            scores.extend(p.tolist())
    try:
        a = ace(scores, labels, threshold=0.5)
    except MetricError:
        a = float("nan")
    return loss_total / max(n, 1), a


def train_global(split, cfg: TrainConfig, cutout_cfg: CutoutConfig = CutoutConfig()):
    """Train the whole-image classifier with zero-masking plus augmentation.

    Every batch is masked (one transform invocation per same-shape batch
    group) and then augmented before the forward pass. Keeps the epoch
    with the best validation ACE.
    """
    cfg.validate()
    t0 = time.perf_counter()
    train_imgs = [s.image for s in split.train]
    train_labels = [s.label for s in split.train]
    _check_two_classes(train_labels, "global training split")

    val = split.validation if split.validation else split.train
    val_imgs = [s.image for s in val]
    val_labels = [s.label for s in val]

    model = build_classifier(cfg.arch_id, seed=cfg.seed)
    model.train()
    opt = _adam(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(param_count=sum(p.numel() for p in model.parameters()))
    best = (float("inf"), None, 0)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_imgs))
        epoch_loss, n_seen = 0.0, 0
        for batch_idx in _batched(list(order), cfg.batch_size):
            # mask per same-shape group so each group is one stacked call
            by_shape = {}
            for i in batch_idx:
                by_shape.setdefault(train_imgs[i].shape, []).append(i)
            batch_imgs, batch_labels = [], []
            for idx_group in by_shape.values():
                stack = np.stack([train_imgs[i] for i in idx_group])
                masked = cutout(stack, cutout_cfg, int(rng.integers(0, 2 ** 31)))
                for j, i in enumerate(idx_group):
                    batch_imgs.append(augment(masked[j], int(rng.integers(0, 2 ** 31))))
                    batch_labels.append(train_labels[i])
            x = to_input(batch_imgs, model.input_size)
            y = torch.tensor(batch_labels)
            loss = classification_loss(spoofness(model(x)), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.item()) * len(batch_imgs)
            n_seen += len(batch_imgs)

        model.eval()
        val_loss, val_ace = _evaluate_classifier(model, val_imgs, val_labels)
        model.train()
        train_loss = epoch_loss / n_seen
        report.epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_ace": val_ace}
        )
        print(f"epoch {epoch} train_loss {train_loss:.6f} val_ace {val_ace:.4f}")
        key = val_ace if not np.isnan(val_ace) else val_loss
        if key < best[0]:
            best = (key, copy.deepcopy(model.state_dict()), epoch)

    if best[1] is not None:
        model.load_state_dict(best[1])
        report.best_epoch = best[2]
    model.eval()
    report.wall_seconds = time.perf_counter() - t0
    return model, report


def _flatten_patches(patches):
    """Accept a PatchSet, a list of PatchSets, or a list of Patch objects."""
    if hasattr(patches, "patches"):
        return list(patches.patches)
    out = []
    for p in patches:
        if hasattr(p, "patches"):
            out.extend(p.patches)
        else:
            out.append(p)
    return out


def pretrain_local_inpainting(
    patches, cfg: TrainConfig, shuffle_cfg: ShuffleConfig = ShuffleConfig()
):
    """Self-supervised warm-up: reconstruct pixel-shuffled patches.

    Each patch is corrupted, passed through the classifier taps, decoded
    back to the patch grid, and scored against the clean patch with the
    tap-space loss plus the pixel loss. Classifier and decoder update
    jointly; the decoder is returned but only the classifier moves on.
    Set cfg.max_steps to cap optimizer steps (0 leaves parameters at
    initialization).
    """
    cfg.validate()
    t0 = time.perf_counter()
    pool = _flatten_patches(patches)
    if not pool:
        raise TrainingError("pretext training needs at least one patch")

    model = build_classifier(cfg.arch_id, seed=cfg.seed)
    decoder = build_decoder(model, seed=cfg.seed)
    model.train()
    opt = _adam(list(model.parameters()) + list(decoder.parameters()), cfg)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(
        param_count=sum(p.numel() for p in model.parameters())
        + sum(p.numel() for p in decoder.parameters())
    )

    steps_done = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.max_steps is not None and steps_done >= cfg.max_steps:
            break
        order = rng.permutation(len(pool))
        epoch_loss, n_batches = 0.0, 0
        for batch_idx in _batched(list(order), cfg.batch_size):
            if cfg.max_steps is not None and steps_done >= cfg.max_steps:
                break
            clean = [pool[i].pixels for i in batch_idx]
            corrupted = [
                pixel_shuffle(c, shuffle_cfg, int(rng.integers(0, 2 ** 31))) for c in clean
            ]
            x = to_input(corrupted, model.input_size)
            target = torch.from_numpy(np.stack(clean).astype(np.float32))[:, None]
            _, pyramid = model.forward_with_taps(x)
            recon = decoder(pyramid)
            loss = cfg.perceptual_weight * perceptual_loss(model, recon, target)
            loss = loss + cfg.pixel_weight * reconstruction_loss(recon, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps_done += 1
            report.step_losses.append(float(loss.item()))
            epoch_loss += float(loss.item())
            n_batches += 1
        if n_batches:
            train_loss = epoch_loss / n_batches
            report.epochs.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": float("nan"),
                    "val_ace": float("nan"),
                }
            )
            print(f"epoch {epoch} train_loss {train_loss:.6f} val_ace nan")

    model.eval()
    decoder.eval()
    report.wall_seconds = time.perf_counter() - t0
    return model, decoder, report


def collect_training_patches(samples, n_per_image=70, seed=0, stride=32):
    """ROI patches sampled per image; each inherits its source label."""
    rng = np.random.default_rng(seed)
    patches, labels = [], []
    for s in samples:
        ps = extract_roi_patches(s, stride=stride)
        if not ps.patches:
            continue
        picked = sample_training_patches(ps, n_per_image, int(rng.integers(0, 2 ** 31)))
        patches.extend(picked.patches)
        labels.extend([s.label] * len(picked.patches))
    return patches, labels


def finetune_local(
    pretrained, patches, labels, cfg: TrainConfig, val_patches=None, val_labels=None
):
    """Cross-entropy fine-tuning of a copy of the pretext-initialized model.

    Patches carry their source image's label; a missing label is a data
    error. Selection uses patch-level ACE on the validation patches when
    given, otherwise the final epoch is kept.
    """
    cfg.validate()
    t0 = time.perf_counter()
    pool = _flatten_patches(patches)
    if not pool:
        raise TrainingError("fine-tuning needs at least one patch")
    if len(pool) != len(labels):
        raise TrainingError(f"{len(pool)} patches but {len(labels)} labels")
    if any(lab is None for lab in labels):
        missing = [p.source_id for p, lab in zip(pool, labels) if lab is None]
        raise TrainingError(f"patches without labels from samples: {missing[:5]}")
    _check_two_classes(labels, "local fine-tuning patch set")

    model = copy.deepcopy(pretrained)
    model.train()
    opt = _adam(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    report = TrainReport(param_count=sum(p.numel() for p in model.parameters()))
    best = (float("inf"), None, 0)
    have_val = val_patches is not None and val_labels is not None and len(val_patches) > 0
    if have_val:
        val_imgs = [p.pixels for p in _flatten_patches(val_patches)]

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pool))
        epoch_loss, n_seen = 0.0, 0
        for batch_idx in _batched(list(order), cfg.batch_size):
            x = to_input([pool[i].pixels for i in batch_idx], model.input_size)
            y = torch.tensor([labels[i] for i in batch_idx])
            loss = classification_loss(spoofness(model(x)), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.item()) * len(batch_idx)
            n_seen += len(batch_idx)

        train_loss = epoch_loss / n_seen
        if have_val:
            model.eval()
            val_loss, val_ace = _evaluate_classifier(model, val_imgs, list(val_labels))
            model.train()
        else:
            val_loss, val_ace = float("nan"), float("nan")
        report.epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_ace": val_ace}
        )
        print(f"epoch {epoch} train_loss {train_loss:.6f} val_ace {val_ace:.4f}")
        if have_val and not np.isnan(val_ace) and val_ace < best[0]:
            best = (val_ace, copy.deepcopy(model.state_dict()), epoch)

    if best[1] is not None:
        model.load_state_dict(best[1])
        report.best_epoch = best[2]
    model.eval()
    report.wall_seconds = time.perf_counter() - t0
    return model, report
