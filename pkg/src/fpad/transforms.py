"""Training-time input corruptions.

Two transforms live here: random square zero-masking applied to whole
images while training the global classifier, and in-window pixel shuffling
used to corrupt patches for the in-painting pretext task. Neither is ever
applied at inference time; the module keeps invocation counters so the
pipeline tests can assert that.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Pipeline probe: incremented on every invocation, reset by tests.
call_counts = {"cutout": 0, "pixel_shuffle": 0}


def reset_call_counts():
    call_counts["cutout"] = 0
    call_counts["pixel_shuffle"] = 0


@dataclass(frozen=True)
class CutoutConfig:
    n_windows: int = 10
    window_size: int = 96

    def __post_init__(self):
        if self.n_windows < 1 or self.window_size < 1:
            raise ConfigError(
                f"cutout config requires n_windows >= 1 and window_size >= 1, "
                f"got ({self.n_windows}, {self.window_size})"
            )


@dataclass(frozen=True)
class ShuffleConfig:
    n_windows: int = 5
    window_size: int = 32

    def __post_init__(self):
        if self.n_windows < 1 or self.window_size < 1:
            raise ConfigError(
                f"shuffle config requires n_windows >= 1 and window_size >= 1, "
                f"got ({self.n_windows}, {self.window_size})"
            )


def _cutout_one(out, cfg, rng):
    h, w = out.shape
    half = cfg.window_size // 2
    for _ in range(cfg.n_windows):
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        y1 = max(cy - half, 0)
        y2 = min(cy - half + cfg.window_size, h)
        x1 = max(cx - half, 0)
        x2 = min(cx - half + cfg.window_size, w)
        out[y1:y2, x1:x2] = 0.0


def cutout(image, cfg: CutoutConfig, rng_seed: int):
    """Zero out cfg.n_windows square regions at uniformly random centers.

    Windows may overlap each other and may be clipped by the image border;
    pixels outside the union of windows are untouched. Deterministic for a
    given (image, cfg, rng_seed). Also accepts a (B, H, W) stack, in which
    case every image gets its own windows; the invocation counter ticks
    once per call either way, so training loops that mask per batch count
    one invocation per batch.
    """
    call_counts["cutout"] += 1
    rng = np.random.default_rng(rng_seed)
    out = np.array(image, dtype=np.float32, copy=True)
    if out.ndim == 2:
        _cutout_one(out, cfg, rng)
    elif out.ndim == 3:
        for i in range(out.shape[0]):
            _cutout_one(out[i], cfg, rng)
    else:
        raise ConfigError(f"cutout expects a 2-D image or 3-D stack, got ndim {out.ndim}")
    return out


def pixel_shuffle(patch, cfg: ShuffleConfig, rng_seed: int):
    """Permute pixel values inside cfg.n_windows random interior windows.

    Window origins are drawn so every window lies fully inside the patch;
    each window's pixels are permuted uniformly at random. Windows may
    overlap, in which case later windows re-permute already shuffled
    values. Pixels outside all windows are unchanged.
    """
    call_counts["pixel_shuffle"] += 1
    out = np.array(patch, dtype=np.float32, copy=True)
    h, w = out.shape
    ws = cfg.window_size
    if ws > min(h, w):
        raise ConfigError(
            f"shuffle window {ws} does not fit in a {h}x{w} patch"
        )
    rng = np.random.default_rng(rng_seed)
    for _ in range(cfg.n_windows):
        r = int(rng.integers(0, h - ws + 1))
        c = int(rng.integers(0, w - ws + 1))
        window = out[r:r + ws, c:c + ws]
        out[r:r + ws, c:c + ws] = rng.permutation(window.ravel()).reshape(ws, ws)
    return out
