"""Modality branches: a small strided encoder, an ASPP-lite decoder and the
segmentation / depth heads.

Parameters live in plain ``dict[str, Variable]`` maps with dotted names
``<branch>.<role>.<layer>.<weight|bias>``; ``role`` is one of ``encoder``,
``decoder`` or ``head``, which is what stage-two freezing keys on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import ShapeError, Variable

Params = dict[str, Variable]

ROLES = ("encoder", "decoder", "head")


@dataclass
class BranchConfig:
    in_channels: int = 3
    feature_channels: int = 16
    encoder_channels: tuple[int, ...] = (8, 16)
    rates: tuple[int, ...] = (1, 2, 4)
    head: str = "segmentation"
    n_classes: int = 5
    downsample: int = field(init=False)

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.rates = tuple(self.rates)
        self.downsample = 2 ** len(self.encoder_channels)
        if self.feature_channels < 2:
            raise ValueError("feature_channels must be >= 2")
        if not self.rates:
            raise ValueError("ASPP needs at least one rate")
        if self.head not in ("segmentation", "depth"):
            raise ValueError(f"unknown head kind {self.head!r}")
        if self.head == "segmentation" and self.n_classes < 2:
            raise ValueError("segmentation heads need K >= 2")

    def check_input(self, shape: tuple[int, ...]) -> None:
        c, h, w = shape[-3:]
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        if h % self.downsample or w % self.downsample:
            raise ShapeError(f"image {h}x{w} not divisible by downsample factor {self.downsample}")


def _he(rng: np.random.Generator, o: int, i: int, k: int) -> np.ndarray:
    return rng.standard_normal((o, i, k, k)) * np.sqrt(2.0 / (i * k * k))


def _conv_params(params: Params, name: str, rng, o: int, i: int, k: int) -> None:
    params[f"{name}.weight"] = Variable(_he(rng, o, i, k), requires_grad=True, name=f"{name}.weight")
    params[f"{name}.bias"] = Variable(np.zeros(o), requires_grad=True, name=f"{name}.bias")


def init_head(cfg: BranchConfig, prefix: str, rng: np.random.Generator, kind: str | None = None) -> Params:
    kind = kind or cfg.head
    out = cfg.n_classes if kind == "segmentation" else 1
    params: Params = {}
    w = rng.standard_normal((out, cfg.feature_channels, 1, 1)) * np.sqrt(1.0 / cfg.feature_channels)
    params[f"{prefix}.head.out.weight"] = Variable(w, requires_grad=True, name=f"{prefix}.head.out.weight")
    params[f"{prefix}.head.out.bias"] = Variable(np.zeros(out), requires_grad=True, name=f"{prefix}.head.out.bias")
    return params


def init_branch(cfg: BranchConfig, prefix: str, rng: np.random.Generator) -> Params:
    """Fresh parameters for one branch, heads included."""
    params: Params = {}
    chans = (cfg.in_channels,) + cfg.encoder_channels
    for i in range(len(cfg.encoder_channels)):
        _conv_params(params, f"{prefix}.encoder.conv{i}", rng, chans[i + 1], chans[i], 3)
    d = cfg.feature_channels
    _conv_params(params, f"{prefix}.encoder.conv{len(cfg.encoder_channels)}", rng, d, chans[-1], 3)
    for r in cfg.rates:
        w = _he(rng, d, d, 3) / np.sqrt(len(cfg.rates))
        params[f"{prefix}.decoder.aspp{r}.weight"] = Variable(w, requires_grad=True)
    _conv_params(params, f"{prefix}.decoder.mix", rng, d, d, 1)
    _conv_params(params, f"{prefix}.decoder.conv", rng, d, d, 3)
    params.update(init_head(cfg, prefix, rng))
    for name, v in params.items():
        v.name = name
    return params


def role_of(name: str) -> str:
    return name.split(".")[1]


def select(params: Params, *roles: str) -> Params:
    return {k: v for k, v in params.items() if role_of(k) in roles}


def _conv(params: Params, name: str, x, **kw) -> Variable:
    out = ops.conv2d(x, params[f"{name}.weight"], **kw)
    return ops.add_channel_bias(out, params[f"{name}.bias"])


def encode(cfg: BranchConfig, params: Params, prefix: str, image) -> Variable:
    x = image
    n = len(cfg.encoder_channels)
    for i in range(n):
        x = ops.relu(_conv(params, f"{prefix}.encoder.conv{i}", x, stride=2, padding=1))
    return ops.relu(_conv(params, f"{prefix}.encoder.conv{n}", x, stride=1, padding=1))


def aspp_lite(feature, kernels: dict[int, Variable], mix_weight, mix_bias=None) -> Variable:
    """Sum of parallel dilated 3x3 convolutions (one per rate, padding = rate),
    followed by a 1x1 mixing convolution.  Shape is preserved."""
    if not kernels:
        raise ValueError("ASPP needs at least one rate")
    total = None
    for rate, k in kernels.items():
        y = ops.conv2d(feature, k, stride=1, dilation=rate, padding=rate)
        total = y if total is None else ops.add(total, y)
    out = ops.conv2d(total, mix_weight)
    if mix_bias is not None:
        out = ops.add_channel_bias(out, mix_bias)
    return out


def decode(cfg: BranchConfig, params: Params, prefix: str, feature) -> Variable:
    kernels = {r: params[f"{prefix}.decoder.aspp{r}.weight"] for r in cfg.rates}
    a = ops.relu(
        aspp_lite(feature, kernels, params[f"{prefix}.decoder.mix.weight"], params[f"{prefix}.decoder.mix.bias"])
    )
    return _conv(params, f"{prefix}.decoder.conv", a, stride=1, padding=1)


def branch_forward(cfg: BranchConfig, params: Params, prefix: str, image) -> Variable:
    """Image (``3 x H x W`` or ``N x 3 x H x W``) to the decoder's last feature
    map (``d x H/s x W/s``)."""
    image = image if isinstance(image, Variable) else Variable(image)
    cfg.check_input(image.shape)
    return decode(cfg, params, prefix, encode(cfg, params, prefix, image))


def segmentation_head(params: Params, prefix: str, feature, out_size: tuple[int, int]) -> Variable:
    """1x1 convolution to K logits, bilinearly upsampled to ``out_size``."""
    logits = _conv(params, f"{prefix}.head.out", feature)
    return ops.upsample_bilinear(logits, out_size)


def depth_head(params: Params, prefix: str, feature, out_size: tuple[int, int]) -> Variable:
    """1x1 convolution to one channel, upsampled, then softplus for positivity.
    Returns ``H x W`` (or ``N x H x W``)."""
    y = ops.softplus(segmentation_head(params, prefix, feature, out_size))
    if y.ndim == 4:
        return ops.reshape(y, (y.shape[0],) + y.shape[2:])
    return ops.reshape(y, y.shape[1:])


def head_forward(kind: str, params: Params, prefix: str, feature, out_size) -> Variable:
    if kind == "segmentation":
        return segmentation_head(params, prefix, feature, out_size)
    return depth_head(params, prefix, feature, out_size)
