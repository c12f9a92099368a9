"""Gradient-based localization of decision evidence.

For a trained whole-image classifier we backpropagate the spoof
probability (or its complement, the live probability) to the three
shallow feature taps. Each tap contributes a map: the gradient is
averaged over space to get one weight per channel, the weighted channel
mean forms the map, and the three maps are bilinearly resized and
averaged. No rectifier is applied by default, so the map built from the
live probability is the exact negation of the spoof one.

The resulting map, resized to the source image, selects the 96x96
window with the largest sum; that window is cropped from the original
image and handed to the patch-level classifier.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import spoofness, to_input
from .dataset import PATCH_SIZE, Patch, patch_variance
from .errors import CamError, ShapeError, ValidationError

TARGETS = ("spoof", "live")

# Shallow taps used for localization; deeper taps have too little
# spatial resolution left to place a patch.
MAP_TAPS = (1, 2, 3)


@dataclass
class ActivationMap:
    values: np.ndarray  # H x W float32, signed unless rectified
    target: str  # "spoof" or "live"
    spoof_probability: float


def reverse_score(score):
    """Complement of a probability-like score: 1 - score."""
    if not 0.0 <= score <= 1.0:
        raise ValidationError(f"score must lie in [0, 1], got {score}")
    return 1.0 - score


def _prepare_input(model, image):
    """Returns (input tensor, (H, W) of the source image the maps align to)."""
    if torch.is_tensor(image):
        x = image.detach().clone()
        source_hw = (int(x.shape[2]), int(x.shape[3]))
    else:
        arr = np.asarray(image)
        source_hw = (int(arr.shape[0]), int(arr.shape[1]))
        x = to_input(image, model.input_size)
    if x.shape[0] != 1:
        raise ShapeError(f"localization works on one image at a time, got batch {x.shape[0]}")
    x.requires_grad_(True)
    return x, source_hw


def _tap_map(tap, grad, out_hw):
    # one weight per channel, spatially averaged gradient
    rz = grad.mean(dim=(2, 3))
    m = (rz[:, :, None, None] * tap).sum(dim=1) / tap.shape[1]
    m = F.interpolate(m[:, None], size=out_hw, mode="bilinear", align_corners=False)
    return m[:, 0]


def _fused_map(taps, grads, out_hw, rectify):
    acc = None
    for t, g in zip(taps, grads):
        m = _tap_map(t, g, out_hw)
        acc = m if acc is None else acc + m
    fused = acc / float(len(taps))
    if rectify:
        fused = torch.relu(fused)
    return fused[0].detach().cpu().numpy().astype(np.float32)


def _graph_taps(model, x):
    logits, pyr = model.forward_with_taps(x)
    gy = spoofness(logits)
    if gy.grad_fn is None:
        raise CamError(
            "no autograd graph was recorded; localization cannot run under torch.no_grad()"
        )
    return gy, [pyr.tap(k) for k in MAP_TAPS]


def activation_map(model, image, target="spoof", rectify=False, out_size=None):
    """Build one fused activation map for the requested probability.

    The map is aligned to the source image grid (or to out_size when
    given), regardless of the classifier's fixed input resolution.
    """
    if target not in TARGETS:
        raise CamError(f"target must be one of {TARGETS}, got {target!r}")
    x, source_hw = _prepare_input(model, image)
    gy, taps = _graph_taps(model, x)
    score = gy if target == "spoof" else 1.0 - gy
    grads = torch.autograd.grad(score.sum(), taps)
    hw = (out_size, out_size) if out_size else source_hw
    values = _fused_map(taps, grads, hw, rectify)
    return ActivationMap(values=values, target=target, spoof_probability=float(gy.item()))


def activation_pair(model, image, rectify=False, out_size=None):
    """Spoof-target and live-target maps from a single forward pass.

    The two gradients are taken on the same graph, so without a
    rectifier the live map is exactly the negated spoof map.
    """
    x, source_hw = _prepare_input(model, image)
    gy, taps = _graph_taps(model, x)
    g_spoof = torch.autograd.grad(gy.sum(), taps, retain_graph=True)
    g_live = torch.autograd.grad((1.0 - gy).sum(), taps)
    hw = (out_size, out_size) if out_size else source_hw
    p = float(gy.item())
    return (
        ActivationMap(_fused_map(taps, g_spoof, hw, rectify), "spoof", p),
        ActivationMap(_fused_map(taps, g_live, hw, rectify), "live", p),
    )


def channel_weights(model, image, target="spoof"):
    """Per-channel gradient weights for the three shallow taps.

    Returns {tap index: vector of length C_k}: the gradient of the
    requested probability with respect to each tap, averaged over the
    spatial grid. This is the quantity multiplied against the feature
    channels when maps are fused.
    """
    if target not in TARGETS:
        raise CamError(f"target must be one of {TARGETS}, got {target!r}")
    x, _ = _prepare_input(model, image)
    gy, taps = _graph_taps(model, x)
    score = gy if target == "spoof" else 1.0 - gy
    grads = torch.autograd.grad(score.sum(), taps)
    return {
        k: g.mean(dim=(2, 3))[0].detach().cpu().numpy()
        for k, g in zip(MAP_TAPS, grads)
    }


def resize_map(values, height, width):
    """Bilinear resize of a 2-D map onto a target grid."""
    t = torch.from_numpy(np.asarray(values, dtype=np.float32))[None, None]
    t = F.interpolate(t, size=(int(height), int(width)), mode="bilinear", align_corners=False)
    return t[0, 0].numpy()


def max_window_origin(values, window=PATCH_SIZE):
    """Origin of the window with the largest sum, ties to smallest (row, col).

    Uses an exclusive-prefix summed-area table in float64; every window
    sum is evaluated, and np.argmax on the window-sum matrix gives the
    first maximum in row-major order.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if h < window or w < window:
        raise ShapeError(f"map {h}x{w} smaller than window {window}")
    sat = np.zeros((h + 1, w + 1), dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(values, axis=0), axis=1)
    s = window
    sums = sat[s:, s:] - sat[:-s, s:] - sat[s:, :-s] + sat[:-s, :-s]
    flat = int(np.argmax(sums))
    r, c = divmod(flat, sums.shape[1])
    return (r, c), float(sums[r, c])


def extract_map_patch(image, amap, window=PATCH_SIZE, source_id=""):
    """Crop the image patch under the map's strongest window.

    The map is first resized to the image grid so origins line up with
    real pixels regardless of the classifier's input size.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.shape[0] < window or img.shape[1] < window:
        raise ShapeError(f"image {img.shape} smaller than window {window}")
    values = amap.values
    if values.shape != img.shape:
        values = resize_map(values, img.shape[0], img.shape[1])
    (r, c), _ = max_window_origin(values, window)
    pixels = img[r:r + window, c:c + window].copy()
    return Patch(
        pixels=pixels,
        origin=(r, c),
        variance=patch_variance(pixels),
        source_id=source_id,
    )


def save_map_binary(amap, bin_path, meta_path):
    """Write raw little-endian float32 values plus a JSON sidecar."""
    import json

    arr = np.ascontiguousarray(amap.values, dtype="<f4")
    with open(bin_path, "wb") as f:
        f.write(arr.tobytes())
    meta = {
        "dtype": "<f4",
        "shape": list(arr.shape),
        "order": "C",
        "target": amap.target,
        "spoof_probability": amap.spoof_probability,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_map_binary(bin_path, meta_path):
    import json

    with open(meta_path) as f:
        meta = json.load(f)
    arr = np.fromfile(bin_path, dtype=meta["dtype"]).reshape(meta["shape"])
    return ActivationMap(
        values=arr.astype(np.float32),
        target=meta["target"],
        spoof_probability=float(meta.get("spoof_probability", float("nan"))),
    )
