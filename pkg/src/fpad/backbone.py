"""Classifier backbones with intermediate feature taps.

Two architectures share one tap interface:

* ``reference-large``: an inverted-residual network with squeeze-excite
  blocks and hard-swish activations, 224x224 input, the configuration
  used for real sensor data.
* ``tiny``: a plain small ConvNet (no batch norm, so finite-difference
  probes of the feature taps are well conditioned), 96x96 input, meant
  for desk-scale experiments and the test suite.

Five taps are exposed: four spatial maps at 1/2, 1/4, 1/8 and 1/32 of
the input resolution plus the pooled global feature vector. The same
taps feed the in-painting decoder and the gradient-based localization
stage, so they are recorded inside the autograd graph, never detached.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CompatibilityError, ConfigError, ShapeError

MIN_INPUT_SIZE = 33

ARCH_INPUT_SIZES = {"reference-large": 224, "tiny": 96}


@dataclass(frozen=True)
class TapSpec:
    index: int  # 1-based tap index
    downsample: int  # input/feature resolution ratio; 0 for the pooled vector
    channels: int


@dataclass
class FeaturePyramid:
    """Recorded tap tensors, keyed 1..5; 5 is the pooled (N, C) vector."""

    taps: dict

    def tap(self, k):
        return self.taps[k]

    @property
    def spatial_indices(self):
        return [k for k in sorted(self.taps) if self.taps[k].dim() == 4]


def _check_input(x):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
    if x.shape[2] < MIN_INPUT_SIZE or x.shape[3] < MIN_INPUT_SIZE:
        raise ShapeError(
            f"input spatial size {x.shape[2]}x{x.shape[3]} below minimum "
            f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
        )


def _offset(t, tap_offsets, k):
    if tap_offsets and k in tap_offsets:
        return t + tap_offsets[k]
    return t


class SqueezeExcite(nn.Module):
    def __init__(self, channels):
        super().__init__()
        squeezed = max(8, channels // 4)
        self.fc1 = nn.Conv2d(channels, squeezed, 1)
        self.fc2 = nn.Conv2d(squeezed, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = F.relu(self.fc1(s))
        s = F.hardsigmoid(self.fc2(s))
        return x * s


class Bottleneck(nn.Module):
    """Inverted residual block: expand, depthwise, optional SE, project."""

    def __init__(self, in_ch, exp_ch, out_ch, kernel, stride, use_se, use_hs):
        super().__init__()
        self.use_residual = stride == 1 and in_ch == out_ch
        self.act = nn.Hardswish() if use_hs else nn.ReLU()
        self.expand = None
        if exp_ch != in_ch:
            self.expand = nn.Sequential(
                nn.Conv2d(in_ch, exp_ch, 1, bias=False), nn.BatchNorm2d(exp_ch)
            )
        self.depthwise = nn.Sequential(
            nn.Conv2d(
                exp_ch, exp_ch, kernel, stride, padding=kernel // 2,
                groups=exp_ch, bias=False,
            ),
            nn.BatchNorm2d(exp_ch),
        )
        self.se = SqueezeExcite(exp_ch) if use_se else None
        self.project = nn.Sequential(
            nn.Conv2d(exp_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch)
        )

    def forward(self, x):
        y = x
        if self.expand is not None:
            y = self.act(self.expand(y))
        y = self.act(self.depthwise(y))
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        if self.use_residual:
            y = y + x
        return y


# Per-block settings: (kernel, expansion, out, squeeze-excite, hard-swish, stride)
_LARGE_BLOCKS = [
    (3, 16, 16, False, False, 1),
    (3, 64, 24, False, False, 2),
    (3, 72, 24, False, False, 1),
    (5, 72, 40, True, False, 2),
    (5, 120, 40, True, False, 1),
    (5, 120, 40, True, False, 1),
    (3, 240, 80, False, True, 2),
    (3, 200, 80, False, True, 1),
    (3, 184, 80, False, True, 1),
    (3, 480, 112, True, True, 1),
    (3, 672, 112, True, True, 1),
    (5, 672, 160, True, True, 2),
    (5, 960, 160, True, True, 1),
    (5, 960, 160, True, True, 1),
]

# Block indices (0-based) whose outputs become taps 1..4.
_LARGE_TAP_BLOCKS = {0: 1, 2: 2, 5: 3, 11: 4}


class ReferenceLarge(nn.Module):
    """Inverted-residual classifier, taps at 1/2, 1/4, 1/8, 1/32 and pooled."""

    arch_id = "reference-large"
    input_size = 224
    tap_specs = (
        TapSpec(1, 2, 16),
        TapSpec(2, 4, 24),
        TapSpec(3, 8, 40),
        TapSpec(4, 32, 160),
        TapSpec(5, 0, 960),
    )

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.Hardswish(),
        )
        blocks = []
        in_ch = 16
        for kernel, exp_ch, out_ch, se, hs, stride in _LARGE_BLOCKS:
            blocks.append(Bottleneck(in_ch, exp_ch, out_ch, kernel, stride, se, hs))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.final_conv = nn.Sequential(
            nn.Conv2d(in_ch, 960, 1, bias=False),
            nn.BatchNorm2d(960),
            nn.Hardswish(),
        )
        self.classifier = nn.Sequential(
            nn.Linear(960, 1280),
            nn.Hardswish(),
            nn.Linear(1280, 2),
        )

    def forward_with_taps(self, x, tap_offsets=None):
        _check_input(x)
        taps = {}
        y = self.stem(x)
        for i, block in enumerate(self.blocks):
            y = block(y)
            if i in _LARGE_TAP_BLOCKS:
                k = _LARGE_TAP_BLOCKS[i]
                y = _offset(y, tap_offsets, k)
                taps[k] = y
        y = self.final_conv(y)
        y = F.adaptive_avg_pool2d(y, 1).flatten(1)
        y = _offset(y, tap_offsets, 5)
        taps[5] = y
        logits = self.classifier(y)
        return logits, FeaturePyramid(taps=taps)

    def forward(self, x):
        logits, _ = self.forward_with_taps(x)
        return logits


class TinyBackbone(nn.Module):
    """Four plain conv stages; batch norm free so tap probes stay linear-ish."""

    arch_id = "tiny"
    input_size = 96
    tap_specs = (
        TapSpec(1, 2, 8),
        TapSpec(2, 4, 12),
        TapSpec(3, 8, 16),
        TapSpec(4, 32, 32),
        TapSpec(5, 0, 64),
    )

    def __init__(self):
        super().__init__()
        self.stage1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.stage2 = nn.Conv2d(8, 12, 3, stride=2, padding=1)
        self.stage3 = nn.Conv2d(12, 16, 3, stride=2, padding=1)
        self.stage4a = nn.Conv2d(16, 24, 3, stride=2, padding=1)
        self.stage4b = nn.Conv2d(24, 32, 3, stride=2, padding=1)
        self.head = nn.Conv2d(32, 64, 1)
        self.classifier = nn.Linear(64, 2)

    def forward_with_taps(self, x, tap_offsets=None):
        _check_input(x)
        taps = {}
        y = F.relu(self.stage1(x))
        y = _offset(y, tap_offsets, 1)
        taps[1] = y
        y = F.relu(self.stage2(y))
        y = _offset(y, tap_offsets, 2)
        taps[2] = y
        y = F.relu(self.stage3(y))
        y = _offset(y, tap_offsets, 3)
        taps[3] = y
        y = F.relu(self.stage4a(y))
        y = F.relu(self.stage4b(y))
        y = _offset(y, tap_offsets, 4)
        taps[4] = y
        y = F.relu(self.head(y))
        y = F.adaptive_avg_pool2d(y, 1).flatten(1)
        y = _offset(y, tap_offsets, 5)
        taps[5] = y
        logits = self.classifier(y)
        return logits, FeaturePyramid(taps=taps)

    def forward(self, x):
        logits, _ = self.forward_with_taps(x)
        return logits


_ARCHS = {"reference-large": ReferenceLarge, "tiny": TinyBackbone}


def build_classifier(arch_id, seed=0, init_weights=True):
    """Construct a classifier with deterministic initialization."""
    if arch_id not in _ARCHS:
        raise ConfigError(f"unknown arch {arch_id!r}; choose from {sorted(_ARCHS)}")
    if init_weights:
        torch.manual_seed(seed)
    model = _ARCHS[arch_id]()
    model.eval()
    return model


def spoofness(logits):
    """Spoof probability: softmax over the two logits, second component."""
    return F.softmax(logits, dim=1)[:, 1]


def to_input(images, input_size):
    """Stack grayscale [0,1] arrays into a (N, 3, S, S) float tensor.

    Accepts a single H x W array or a list of them; each image is
    triplicated across channels and bilinearly resized to the given
    square size. Mixed input sizes are fine since everything lands on
    the same grid.
    """
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    tensors = []
    for img in images:
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2-D grayscale image, got shape {arr.shape}")
        t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
        if t.shape[2] != input_size or t.shape[3] != input_size:
            t = F.interpolate(
                t, size=(input_size, input_size), mode="bilinear", align_corners=False
            )
        tensors.append(t)
    batch = torch.cat(tensors, dim=0)
    return batch.repeat(1, 3, 1, 1)


def expand_reconstruction(recon, input_size):
    """(N, 1, H, W) reconstruction -> (N, 3, S, S) network input, differentiable."""
    if recon.dim() != 4 or recon.shape[1] != 1:
        raise ShapeError(f"expected (N, 1, H, W), got {tuple(recon.shape)}")
    t = recon
    if t.shape[2] != input_size or t.shape[3] != input_size:
        t = F.interpolate(
            t, size=(input_size, input_size), mode="bilinear", align_corners=False
        )
    return t.repeat(1, 3, 1, 1)


def classification_loss(spoof_probs, labels, eps=1e-7):
    """Binary cross-entropy on the spoof probability, clamped away from 0/1."""
    p = torch.clamp(spoof_probs, eps, 1.0 - eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def reconstruction_loss(recon, target):
    """Mean squared pixel error between reconstruction and original patch."""
    if recon.shape != target.shape:
        raise ShapeError(
            f"reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}"
        )
    return F.mse_loss(recon, target)


def perceptual_loss(model, recon, target):
    """Average tap-space MSE over the three shallow taps.

    Both the reconstruction and the clean target are pushed through the
    classifier; target-side taps are detached so only the decoder (via
    the reconstruction) receives gradient.
    """
    x_r = expand_reconstruction(recon, model.input_size)
    x_t = expand_reconstruction(target, model.input_size)
    _, pyr_r = model.forward_with_taps(x_r)
    with torch.no_grad():
        _, pyr_t = model.forward_with_taps(x_t)
    total = 0.0
    for k in (1, 2, 3):
        total = total + F.mse_loss(pyr_r.tap(k), pyr_t.tap(k).detach())
    return total / 3.0


class DecoderNet(nn.Module):
    """Upsampling decoder that rebuilds a patch from the five taps.

    The pooled vector conditions the deepest spatial map, then three
    nearest-neighbor upsampling steps each concatenate the matching
    shallower tap, U-Net style. Output is a sigmoid 1-channel image
    resized to the patch grid.
    """

    def __init__(self, tap_specs, out_size=96):
        super().__init__()
        c1, c2, c3, c4, c5 = (s.channels for s in tap_specs)
        self.tap_channels = (c1, c2, c3, c4, c5)
        h = [min(64, max(12, c)) for c in (c1, c2, c3, c4)]
        self.out_size = out_size
        self.condition = nn.Linear(c5, c4)
        self.conv4 = nn.Conv2d(c4, h[3], 3, padding=1)
        self.conv3 = nn.Conv2d(h[3] + c3, h[2], 3, padding=1)
        self.conv2 = nn.Conv2d(h[2] + c2, h[1], 3, padding=1)
        self.conv1 = nn.Conv2d(h[1] + c1, h[0], 3, padding=1)
        self.out = nn.Conv2d(h[0], 1, 3, padding=1)

    def forward(self, pyramid):
        f1, f2, f3, f4, f5 = (pyramid.tap(k) for k in (1, 2, 3, 4, 5))
        got = (f1.shape[1], f2.shape[1], f3.shape[1], f4.shape[1], f5.shape[1])
        if got != self.tap_channels:
            raise CompatibilityError(
                f"pyramid channels {got} do not match decoder taps {self.tap_channels}"
            )
        x = f4 + self.condition(f5)[:, :, None, None]
        x = F.relu(self.conv4(x))
        x = F.interpolate(x, size=f3.shape[2:], mode="nearest")
        x = F.relu(self.conv3(torch.cat([x, f3], dim=1)))
        x = F.interpolate(x, size=f2.shape[2:], mode="nearest")
        x = F.relu(self.conv2(torch.cat([x, f2], dim=1)))
        x = F.interpolate(x, size=f1.shape[2:], mode="nearest")
        x = F.relu(self.conv1(torch.cat([x, f1], dim=1)))
        x = torch.sigmoid(self.out(x))
        if x.shape[2] != self.out_size or x.shape[3] != self.out_size:
            x = F.interpolate(
                x, size=(self.out_size, self.out_size), mode="bilinear",
                align_corners=False,
            )
        return x


def build_decoder(model, seed=0, out_size=96):
    torch.manual_seed(seed)
    dec = DecoderNet(model.tap_specs, out_size=out_size)
    dec.train()
    return dec


def decode_inpaint(model, decoder, corrupted):
    """Run corrupted patches through the classifier taps and the decoder."""
    x = to_input(corrupted, model.input_size) if not torch.is_tensor(corrupted) else corrupted
    _, pyramid = model.forward_with_taps(x)
    return decoder(pyramid)
