"""Checkpoint directory format.

A checkpoint is a directory holding:

* ``manifest.json``: arch id, input size, tap layout, training epoch,
  seed and any recorded metrics.
* ``weights.bin``: a little-endian record stream. 8-byte magic, uint32
  record count, then per tensor: uint16 name length, utf-8 name, uint8
  rank, uint32 per dimension, raw float32 data. Every tensor is stored
  as float32 and cast back to the model's dtype on load, which keeps the
  file free of pickles and stable across torch versions.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CompatibilityError

MAGIC = b"FPADW001"


def save_checkpoint(out_dir, model, epoch=0, seed=0, metrics=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "fpad-checkpoint-v1",
        "arch_id": model.arch_id,
        "input_size": model.input_size,
        "taps": [
            {"index": s.index, "downsample": s.downsample, "channels": s.channels}
            for s in model.tap_specs
        ],
        "epoch": int(epoch),
        "seed": int(seed),
        "metrics": metrics or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    state = model.state_dict()
    with open(out / "weights.bin", "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            data = tensor.detach().cpu().contiguous().to(torch.float32).numpy()
            data = data.astype("<f4", copy=False)  # keeps 0-d buffers 0-d
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.tobytes())
    return out


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"weights file truncated while reading {what}")
    return b


def read_weight_records(weights_path):
    """Parse weights.bin into an ordered {name: float32 ndarray} dict."""
    records = {}
    with open(weights_path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"bad magic in {weights_path}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "dim"))[0] for _ in range(rank)
            )
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 4 * n_items, f"data for {name}")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"trailing bytes after last record in {weights_path}")
    return records


def load_manifest(ckpt_dir):
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest is not valid JSON: {e}") from e
    for key in ("arch_id", "input_size", "taps"):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest missing {key!r}")
    return manifest


def load_checkpoint(ckpt_dir, expect_arch=None):
    """Rebuild the model from a checkpoint directory.

    Returns (model, manifest). Raises CompatibilityError when the stored
    arch does not match expect_arch, CheckpointError when the weight
    records disagree with the freshly built model's state dict.
    """
    from .backbone import build_classifier

    manifest = load_manifest(ckpt_dir)
    arch = manifest["arch_id"]
    if expect_arch is not None and arch != expect_arch:
        raise CompatibilityError(
            f"checkpoint holds arch {arch!r} but {expect_arch!r} was requested"
        )
    model = build_classifier(arch, seed=int(manifest.get("seed", 0)))
    records = read_weight_records(Path(ckpt_dir) / "weights.bin")

    state = model.state_dict()
    missing = [k for k in state if k not in records]
    extra = [k for k in records if k not in state]
    if missing or extra:
        raise CheckpointError(
            f"weight records do not match arch {arch!r}: "
            f"missing={missing[:5]} extra={extra[:5]}"
        )
    new_state = {}
    for name, ref in state.items():
        arr = records[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: file {arr.shape} vs model {tuple(ref.shape)}"
            )
        new_state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new_state)
    model.eval()
    return model, manifest
