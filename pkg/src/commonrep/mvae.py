"""Two-view autoencoder over branch feature maps (the common representation).

Projections are 1x1 convolutions, so the hidden map keeps the spatial extent
of its inputs.  A single-view encoding drops the absent view's projection
term, which is the same as feeding that view as zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ShapeError, Variable, as_variable

Params = dict[str, Variable]

ACTIVATIONS = {"tanh": ops.tanh, "sigmoid": ops.sigmoid, "identity": ops.identity}
VAR_EPS = 1e-8


@dataclass
class MvaeConfig:
    feature_channels: int = 16
    hidden_channels: int | None = None
    hidden_act: str = "tanh"
    output_act: str = "identity"

    def __post_init__(self):
        if self.hidden_channels is None:
            self.hidden_channels = max(1, self.feature_channels // 2)
        if self.hidden_channels > self.feature_channels:
            raise ValueError("hidden size k must not exceed feature size d")
        if self.hidden_act not in ("tanh", "sigmoid"):
            raise ValueError(f"hidden activation must be tanh or sigmoid, got {self.hidden_act!r}")
        if self.output_act not in ("identity", "tanh"):
            raise ValueError(f"output activation must be identity or tanh, got {self.output_act!r}")


def init_mvae(d: int, k: int, rng: np.random.Generator, scale: float = 1.0, prefix: str = "mvae") -> Params:
    def var(name, arr):
        return Variable(arr, requires_grad=True, name=f"{prefix}.{name}")

    sx = scale / np.sqrt(d)
    sk = scale / np.sqrt(k)
    return {
        f"{prefix}.W_x": var("W_x", rng.standard_normal((k, d, 1, 1)) * sx),
        f"{prefix}.W_d": var("W_d", rng.standard_normal((k, d, 1, 1)) * sx),
        f"{prefix}.V_x": var("V_x", rng.standard_normal((d, k, 1, 1)) * sk),
        f"{prefix}.V_d": var("V_d", rng.standard_normal((d, k, 1, 1)) * sk),
        f"{prefix}.b": var("b", np.zeros(k)),
        f"{prefix}.b_r": var("b_r", np.zeros(2 * d)),
    }


def _get(params: Params, key: str, prefix: str = "mvae") -> Variable:
    return params[f"{prefix}.{key}"]


def _project(view, weight: Variable) -> Variable:
    view = as_variable(view)
    if view.shape[-3] != weight.shape[1]:
        raise ShapeError(f"view has {view.shape[-3]} channels, projection expects {weight.shape[1]}")
    return ops.conv2d(view, weight)


def encode_joint(params: Params, xp, dp, act: str = "tanh", prefix: str = "mvae") -> Variable:
    """h(W_x * x^p + W_d * d^p + b)."""
    if xp is None or dp is None:
        raise ValueError("encode_joint needs both views; use encode_single for one")
    xp, dp = as_variable(xp), as_variable(dp)
    if xp.shape != dp.shape:
        raise ShapeError(f"view shapes differ: {xp.shape} vs {dp.shape}")
    pre = ops.add(_project(xp, _get(params, "W_x", prefix)), _project(dp, _get(params, "W_d", prefix)))
    return ACTIVATIONS[act](ops.add_channel_bias(pre, _get(params, "b", prefix)))


def encode_single(params: Params, view, which: str, act: str = "tanh", prefix: str = "mvae") -> Variable:
    """h(W_v * v + b) for the one available view ``which`` in {rgb, depth}."""
    if which not in ("rgb", "depth"):
        raise ValueError(f"view must be 'rgb' or 'depth', got {which!r}")
    w = _get(params, "W_x" if which == "rgb" else "W_d", prefix)
    return ACTIVATIONS[act](ops.add_channel_bias(_project(view, w), _get(params, "b", prefix)))


def encode(params: Params, xp=None, dp=None, act: str = "tanh", prefix: str = "mvae") -> Variable:
    if xp is not None and dp is not None:
        return encode_joint(params, xp, dp, act, prefix)
    if xp is not None:
        return encode_single(params, xp, "rgb", act, prefix)
    if dp is not None:
        return encode_single(params, dp, "depth", act, prefix)
    raise ValueError("at least one view is required")


def decode(params: Params, hidden, act: str = "identity", prefix: str = "mvae") -> tuple[Variable, Variable]:
    """g([V_x * h, V_d * h] + b_r), split back into (x^r, d^r)."""
    hidden = as_variable(hidden)
    vx, vd = _get(params, "V_x", prefix), _get(params, "V_d", prefix)
    if hidden.shape[-3] != vx.shape[1]:
        raise ShapeError(f"hidden has {hidden.shape[-3]} channels, expected {vx.shape[1]}")
    d = vx.shape[0]
    br = _get(params, "b_r", prefix)
    g = ACTIVATIONS[act]
    xr = g(ops.add_channel_bias(ops.conv2d(hidden, vx), ops.getitem(br, slice(0, d))))
    dr = g(ops.add_channel_bias(ops.conv2d(hidden, vd), ops.getitem(br, slice(d, 2 * d))))
    return xr, dr


def _sq_err(target_x, target_d, rec: tuple[Variable, Variable]) -> Variable:
    # ||z - z'||^2 as a mean over both views' elements
    ex = ops.sum(ops.square(ops.sub(rec[0], target_x)))
    ed = ops.sum(ops.square(ops.sub(rec[1], target_d)))
    n = target_x.value.size + target_d.value.size
    return ops.scale(ops.add(ex, ed), 1.0 / n)


def reconstruction_terms(
    params: Params, xp, dp, hidden_act: str = "tanh", output_act: str = "identity", prefix: str = "mvae"
) -> dict[str, Variable]:
    """The joint, rgb-only and depth-only reconstruction errors against z."""
    xp, dp = as_variable(xp), as_variable(dp)
    hj = encode_joint(params, xp, dp, hidden_act, prefix)
    hx = encode_single(params, xp, "rgb", hidden_act, prefix)
    hd = encode_single(params, dp, "depth", hidden_act, prefix)
    return {
        "joint": _sq_err(xp, dp, decode(params, hj, output_act, prefix)),
        "rgb": _sq_err(xp, dp, decode(params, hx, output_act, prefix)),
        "depth": _sq_err(xp, dp, decode(params, hd, output_act, prefix)),
    }


def reconstruction_loss(
    params: Params, xp, dp, hidden_act: str = "tanh", output_act: str = "identity", prefix: str = "mvae"
) -> Variable:
    t = reconstruction_terms(params, xp, dp, hidden_act, output_act, prefix)
    return ops.add(ops.add(t["joint"], t["rgb"]), t["depth"])


def correlation(hidden_x, hidden_d, var_eps: float = VAR_EPS) -> Variable:
    """Batch Pearson correlation per hidden coordinate, averaged over the
    coordinates whose batch variance exceeds ``var_eps`` in both views.

    Inputs are ``B x ...`` with B >= 2; returns 0 if every coordinate is
    degenerate.
    """
    hx, hd = as_variable(hidden_x), as_variable(hidden_d)
    if hx.shape != hd.shape:
        raise ShapeError(f"hidden shapes differ: {hx.shape} vs {hd.shape}")
    b = hx.shape[0]
    if b < 2:
        raise ValueError("correlation needs a batch of at least 2")
    cx = ops.sub(hx, ops.broadcast_to(ops.mean(hx, axes=0, keepdims=True), hx.shape))
    cd = ops.sub(hd, ops.broadcast_to(ops.mean(hd, axes=0, keepdims=True), hd.shape))
    cov = ops.mean(ops.mul(cx, cd), axes=0)
    vx = ops.mean(ops.square(cx), axes=0)
    vd = ops.mean(ops.square(cd), axes=0)
    valid = ((vx.value > var_eps) & (vd.value > var_eps)).astype(np.float64)
    n_valid = int(valid.sum())
    # degenerate coordinates get denominator 1 and weight 0
    denom = ops.sqrt(ops.add(ops.mul(ops.mul(vx, vd), valid), 1.0 - valid))
    r = ops.mul(ops.div(cov, denom), valid)
    if n_valid == 0:
        return ops.scale(ops.sum(r), 0.0)
    return ops.scale(ops.sum(r), 1.0 / n_valid)


def fit_mvae(
    params: Params,
    xp: np.ndarray,
    dp: np.ndarray,
    steps: int,
    lr: float = 1e-2,
    hidden_act: str = "tanh",
    output_act: str = "identity",
    corr_weight: float = 0.0,
    prefix: str = "mvae",
) -> list[float]:
    """Full-batch Adam on the reconstruction objective alone (no branches).

    ``xp`` and ``dp`` are ``B x d x H x W`` feature batches.  Returns the loss
    per step; ``params`` are updated in place.
    """
    from .autodiff import backward
    from .optim import Adam

    opt = Adam(params)
    xp, dp = Variable(xp), Variable(dp)
    curve = []
    for _ in range(steps):
        opt.zero_grad()
        loss = reconstruction_loss(params, xp, dp, hidden_act, output_act, prefix)
        if corr_weight:
            hx = encode_single(params, xp, "rgb", hidden_act, prefix)
            hd = encode_single(params, dp, "depth", hidden_act, prefix)
            loss = ops.sub(loss, ops.scale(correlation(hx, hd), corr_weight))
        backward(loss)
        opt.step(lr)
        curve.append(loss.item())
    return curve


def cross_reconstruct(params: Params, xp, hidden_act: str = "tanh", output_act: str = "identity",
                      prefix: str = "mvae") -> np.ndarray:
    """Depth-view features predicted from the rgb view alone."""
    from .autodiff import no_grad

    with no_grad():
        return decode(params, encode_single(params, xp, "rgb", hidden_act, prefix), output_act, prefix)[1].value
