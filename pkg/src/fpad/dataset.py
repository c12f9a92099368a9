"""Dataset ingestion, ROI patch extraction and synthetic data generation.

A dataset is described by a JSON manifest:

    {"samples": [{"id", "path", "label", "sensor", "material"}, ...],
     "splits": {"train": [id], "validation": [id], "test": [id]}}

Images are 8-bit or 16-bit grayscale PNG and are min-max normalized to
[0, 1] at ingestion. The synthetic generator produces desk-scale
fingerprint-like data: live samples are oriented sinusoidal ridge
patterns with pores, spoof samples are the same patterns degraded by a
per-material recipe, with train and test spoof materials kept disjoint
so the cross-material protocol is exercised end to end.
"""

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    ConfigError,
    IngestionError,
    ManifestError,
    SampleRejectionError,
    SamplingError,
)

log = logging.getLogger(__name__)

PATCH_SIZE = 96

LABEL_LIVE = 0
LABEL_SPOOF = 1


@dataclass
class FingerprintSample:
    """One grayscale capture with its label and acquisition tags."""

    image: np.ndarray  # H x W float32 in [0, 1]
    label: int  # 0 = live, 1 = spoof
    sensor: str
    material: str | None
    id: str


@dataclass
class Patch:
    pixels: np.ndarray  # 96 x 96 float32 in [0, 1]
    origin: tuple  # (row, col) in the source image
    variance: float
    source_id: str


@dataclass
class PatchSet:
    patches: list
    threshold_used: float
    empty_warning: bool = False

    def __len__(self):
        return len(self.patches)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    manifest_path: str = ""

    def split(self, name):
        if name not in ("train", "validation", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def spoof_materials(self, name):
        return {
            s.material
            for s in self.split(name)
            if s.label == LABEL_SPOOF and s.material is not None
        }

    @property
    def materials_disjoint(self):
        """True when no spoof material appears in both train and test."""
        return not (self.spoof_materials("train") & self.spoof_materials("test"))


def _parse_label(raw):
    if raw in (0, "0", "live"):
        return LABEL_LIVE
    if raw in (1, "1", "spoof"):
        return LABEL_SPOOF
    raise ManifestError(f"label must be live/0 or spoof/1, got {raw!r}")


def load_image(path):
    """Read a grayscale PNG and min-max normalize it to [0, 1] float32."""
    p = Path(path)
    if not p.exists():
        raise IngestionError(f"image file not found: {p}")
    with Image.open(p) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise IngestionError(f"expected single-channel image, got shape {arr.shape}: {p}")
    arr = arr.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    return arr.astype(np.float32)


def load_dataset(manifest_path):
    """Load a manifest-described dataset into an in-memory DatasetSplit.

    Raises IngestionError for missing files, ManifestError for structural
    problems (duplicate or overlapping ids, unknown references) and
    SampleRejectionError listing every sample smaller than 96x96.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {path}: {e}") from e
    if "samples" not in doc or "splits" not in doc:
        raise ManifestError(f"manifest must declare 'samples' and 'splits': {path}")

    by_id = {}
    for entry in doc["samples"]:
        for key in ("id", "path", "label", "sensor"):
            if key not in entry:
                raise ManifestError(f"sample entry missing '{key}': {entry}")
        if entry["id"] in by_id:
            raise ManifestError(f"duplicate sample id {entry['id']!r}")
        by_id[entry["id"]] = entry

    split_ids = {}
    for name in ("train", "validation", "test"):
        ids = doc["splits"].get(name, [])
        unknown = [i for i in ids if i not in by_id]
        if unknown:
            raise ManifestError(f"split {name!r} references unknown ids: {unknown}")
        if len(set(ids)) != len(ids):
            raise ManifestError(f"split {name!r} lists an id twice")
        split_ids[name] = ids
    for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
        overlap = set(split_ids[a]) & set(split_ids[b])
        if overlap:
            raise ManifestError(
                f"splits {a!r} and {b!r} share sample ids: {sorted(overlap)}"
            )

    base = path.parent
    rejected = []
    loaded = {}
    for name, ids in split_ids.items():
        for sid in ids:
            entry = by_id[sid]
            img = load_image(base / entry["path"])
            if img.shape[0] < PATCH_SIZE or img.shape[1] < PATCH_SIZE:
                rejected.append(sid)
                continue
            loaded[sid] = FingerprintSample(
                image=img,
                label=_parse_label(entry["label"]),
                sensor=str(entry["sensor"]),
                material=entry.get("material"),
                id=sid,
            )
    if rejected:
        raise SampleRejectionError(
            f"{len(rejected)} sample(s) smaller than {PATCH_SIZE}x{PATCH_SIZE}: "
            f"{rejected}",
            sample_ids=rejected,
        )
    return DatasetSplit(
        train=[loaded[i] for i in split_ids["train"]],
        validation=[loaded[i] for i in split_ids["validation"]],
        test=[loaded[i] for i in split_ids["test"]],
        manifest_path=str(path),
    )


def write_dataset(split, out_dir):
    """Write a DatasetSplit as 8-bit PNGs plus a manifest; returns the path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    splits = {"train": [], "validation": [], "test": []}
    for name in ("train", "validation", "test"):
        for s in split.split(name):
            rel = f"images/{s.id}.png"
            arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out / rel)
            samples.append(
                {
                    "id": s.id,
                    "path": rel,
                    "label": "spoof" if s.label == LABEL_SPOOF else "live",
                    "sensor": s.sensor,
                    "material": s.material,
                }
            )
            splits[name].append(s.id)
    manifest = out / "manifest.json"
    manifest.write_text(
        json.dumps({"samples": samples, "splits": splits}, indent=2, sort_keys=True)
    )
    split.manifest_path = str(manifest)
    return manifest


def patch_variance(patch_pixels):
    """Population variance (divisor H*W) of a pixel matrix."""
    return float(np.var(np.asarray(patch_pixels, dtype=np.float64)))


def grid_origins(height, width, patch_size, stride):
    rows = range(0, height - patch_size + 1, stride)
    cols = range(0, width - patch_size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def extract_roi_patches(sample, patch_size=PATCH_SIZE, stride=32, t=None):
    """Enumerate the stride grid of patches and keep those with variance > t.

    With t=None the threshold adapts to the image: half the mean patch
    variance over the grid, which keeps ROI selection sensor-agnostic.
    Returns an empty PatchSet with empty_warning set when nothing passes.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    img = sample.image
    h, w = img.shape
    if patch_size > min(h, w):
        raise ConfigError(
            f"patch size {patch_size} exceeds image {h}x{w} for sample {sample.id}"
        )
    origins = grid_origins(h, w, patch_size, stride)
    variances = [
        patch_variance(img[r:r + patch_size, c:c + patch_size]) for r, c in origins
    ]
    if t is None:
        t = 0.5 * float(np.mean(variances))
    patches = [
        Patch(
            pixels=img[r:r + patch_size, c:c + patch_size].copy(),
            origin=(r, c),
            variance=v,
            source_id=sample.id,
        )
        for (r, c), v in zip(origins, variances)
        if v > t
    ]
    if not patches:
        log.warning("no patch passed variance threshold %.6g for sample %s", t, sample.id)
    return PatchSet(patches=patches, threshold_used=float(t), empty_warning=not patches)


def sample_training_patches(patch_set, n, rng_seed):
    """Draw exactly n patches, without replacement when enough are available."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    pool = patch_set.patches
    if not pool:
        raise SamplingError("cannot sample from an empty patch set")
    rng = np.random.default_rng(rng_seed)
    replace = len(pool) < n
    idx = rng.choice(len(pool), size=n, replace=replace)
    return PatchSet(
        patches=[pool[i] for i in idx],
        threshold_used=patch_set.threshold_used,
    )


def rotate_image(image, degrees):
    """Rotate about the image center, bilinear, border filled by edge replication."""
    return ndimage.rotate(
        image, degrees, reshape=False, order=1, mode="nearest"
    ).astype(np.float32)


def augment(image, rng_seed):
    """Randomly flip vertically/horizontally and rotate within +-15 degrees.

    Each of the three operations is applied independently with probability
    one half; output values stay in [0, 1].
    """
    rng = np.random.default_rng(rng_seed)
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < 0.5:
        out = np.flipud(out)
    if rng.random() < 0.5:
        out = np.fliplr(out)
    if rng.random() < 0.5:
        angle = float(rng.uniform(-15.0, 15.0))
        out = rotate_image(out, angle)
    return np.clip(np.ascontiguousarray(out, dtype=np.float32), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTH_MATERIALS = ("smoothing", "blobs", "flattening")


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale synthetic dataset layout.

    n_live / n_spoof size the train pool, which is split into train and
    validation by validation_fraction; the test set defaults to half the
    pool size per class. Train spoofs alternate between two materials and
    test spoofs use a third, so the manifest satisfies the cross-material
    protocol out of the box.
    """

    n_live: int = 100
    n_spoof: int = 100
    n_live_test: int | None = None
    n_spoof_test: int | None = None
    image_size: int = 160
    sensor: str = "synthA"
    train_materials: tuple = ("smoothing", "blobs")
    test_material: str = "flattening"
    validation_fraction: float = 0.2
    # Degradation severity range; the low end controls how subtle the
    # hardest spoofs are and therefore how separable the dataset is.
    severity_lo: float = 0.35
    severity_hi: float = 1.0
    live_blur_max: float = 0.45

    def validate(self):
        if self.n_live < 1 or self.n_spoof < 1:
            raise ConfigError(
                f"synthetic config needs positive class counts, got "
                f"live={self.n_live} spoof={self.n_spoof}"
            )
        if self.image_size < 160:
            raise ConfigError(
                f"synthetic image size must be >= 160, got {self.image_size}"
            )
        if len(self.train_materials) != 2:
            raise ConfigError("exactly two train spoof materials are required")
        if self.test_material in self.train_materials:
            raise ConfigError(
                f"test material {self.test_material!r} must be disjoint from "
                f"train materials {self.train_materials}"
            )
        for m in (*self.train_materials, self.test_material):
            if m not in SYNTH_MATERIALS:
                raise ConfigError(f"unknown material {m!r}; choose from {SYNTH_MATERIALS}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")


def _sensor_profile(sensor):
    # Stable per-sensor rendering tweaks so cross-sensor runs see a shift.
    h = zlib.crc32(sensor.encode())
    return {
        "background": 0.86 + (h % 5) * 0.015,
        "contrast": 0.30 + ((h >> 3) % 4) * 0.03,
        "period_lo": 6.0 + ((h >> 5) % 3),
        "period_hi": 12.0 - ((h >> 7) % 2),
    }


def _live_image(size, rng, profile):
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u, v = xx / s, yy / s
    theta = rng.uniform(0.0, np.pi)
    for _ in range(2):
        amp = rng.uniform(0.2, 0.6)
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        theta = theta + amp * np.sin(2 * np.pi * (fx * u + fy * v) + rng.uniform(0, 2 * np.pi))
    period = rng.uniform(profile["period_lo"], profile["period_hi"])
    phase = (2 * np.pi / period) * (xx * np.cos(theta) + yy * np.sin(theta))
    ridges = 0.5 - profile["contrast"] * np.cos(phase + rng.uniform(0, 2 * np.pi))

    # pores: small bright dots riding on the ridge pattern
    n_pores = int(rng.integers(40, 90))
    for _ in range(n_pores):
        cy = int(rng.integers(4, s - 4))
        cx = int(rng.integers(4, s - 4))
        r = 3
        ys, xs = np.mgrid[cy - r:cy + r + 1, cx - r:cx + r + 1]
        bump = 0.45 * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * 1.1 ** 2))
        ridges[cy - r:cy + r + 1, cx - r:cx + r + 1] += bump

    # elliptical finger footprint with a soft edge; margins stay blank
    cy = s / 2 + rng.uniform(-0.04, 0.04) * s
    cx = s / 2 + rng.uniform(-0.04, 0.04) * s
    ry = rng.uniform(0.32, 0.42) * s
    rx = rng.uniform(0.30, 0.40) * s
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    mask = 1.0 / (1.0 + np.exp((d - 1.0) * 18.0))

    img = profile["background"] * (1.0 - mask) + ridges * mask
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _apply_material(img, material, severity, rng):
    out = img.astype(np.float64)
    if material == "smoothing":
        out = ndimage.gaussian_filter(out, sigma=0.9 + 1.6 * severity)
    elif material == "blobs":
        n = 4 + int(round(8 * severity))
        s = out.shape[0]
        for _ in range(n):
            cy = int(rng.integers(s // 5, 4 * s // 5))
            cx = int(rng.integers(s // 5, 4 * s // 5))
            r = int(rng.integers(8, 19))
            y1, y2 = max(cy - r, 0), min(cy + r, s)
            x1, x2 = max(cx - r, 0), min(cx + r, s)
            region = out[y1:y2, x1:x2]
            yy, xx = np.mgrid[y1:y2, x1:x2]
            blob = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
            region[blob] = region.mean()
        out = ndimage.gaussian_filter(out, sigma=0.5)
    elif material == "flattening":
        mu = out.mean()
        gamma = 0.70 - 0.35 * severity
        out = mu + gamma * (out - mu)
        out = ndimage.gaussian_filter(out, sigma=0.5 + 0.4 * severity)
    else:
        raise ConfigError(f"unknown material {material!r}")
    return np.clip(out, 0.0, 1.0)


def generate_synthetic(config: SynthConfig, seed: int) -> DatasetSplit:
    """Generate the in-memory synthetic dataset; bitwise reproducible per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    profile = _sensor_profile(config.sensor)
    n_live_test = config.n_live_test if config.n_live_test is not None else config.n_live // 2
    n_spoof_test = config.n_spoof_test if config.n_spoof_test is not None else config.n_spoof // 2
    if n_live_test < 1 or n_spoof_test < 1:
        raise ConfigError("test split would be empty; raise class counts")

    def make(split_name, label, material, count):
        out = []
        for i in range(count):
            img = _live_image(config.image_size, rng, profile)
            if label == LABEL_LIVE:
                sigma = rng.uniform(0.0, config.live_blur_max)
                if sigma > 0.05:
                    img = np.clip(ndimage.gaussian_filter(img, sigma=sigma), 0.0, 1.0)
                mat = None
            else:
                severity = rng.uniform(config.severity_lo, config.severity_hi)
                mat = material[i % len(material)] if isinstance(material, tuple) else material
                img = _apply_material(img, mat, severity, rng)
            tag = "live" if label == LABEL_LIVE else "spoof"
            out.append(
                FingerprintSample(
                    image=img.astype(np.float32),
                    label=label,
                    sensor=config.sensor,
                    material=mat,
                    id=f"{config.sensor}-{split_name}-{tag}-{i:04d}",
                )
            )
        return out

    n_val_live = max(1, int(round(config.validation_fraction * config.n_live)))
    n_val_spoof = max(1, int(round(config.validation_fraction * config.n_spoof)))
    train = make("train", LABEL_LIVE, None, config.n_live - n_val_live)
    train += make("train", LABEL_SPOOF, config.train_materials, config.n_spoof - n_val_spoof)
    val = make("val", LABEL_LIVE, None, n_val_live)
    val += make("val", LABEL_SPOOF, config.train_materials, n_val_spoof)
    test = make("test", LABEL_LIVE, None, n_live_test)
    test += make("test", LABEL_SPOOF, config.test_material, n_spoof_test)
    return DatasetSplit(train=train, validation=val, test=test)
