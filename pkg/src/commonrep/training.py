"""Two-stage training, prediction and evaluation.

Stage one trains the RGB and depth branches independently with momentum SGD
under a polynomial learning-rate schedule.  Stage two drops the stage-one
heads, adds the two-view autoencoder and fresh heads on its reconstructions,
freezes both encoders and trains the rest with Adam on

    L_ss_rgb + L_d + rec_weight * L_rec - corr_weight * corr.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import branch as br
from . import mvae as mv
from .autodiff import Variable, backward, no_grad
from .checkpoint import Checkpoint, CheckpointError, check_compatible
from .data import Batch, Sample, batch_stream, collate
from .losses import LossWeights, cross_entropy_loss, depth_loss, total_objective, total_objective_value
from .metrics import ConfusionMatrix, iou, rmse
from .optim import SGD, Adam, poly_lr

log = logging.getLogger(__name__)

SETTINGS = ("ss", "ssd")
VIEWS = ("rgb", "depth", "both")
CURVE_COLUMNS = ["stage", "iteration", "lr", "l_ss_rgb", "l_d", "l_rec", "corr", "total"]


@dataclass
class TrainConfig:
    setting: str = "ss"
    n_classes: int = 5
    feature_channels: int = 16
    hidden_channels: int = 8
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    batch_size: int = 8
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    stage2_lr: float = 0.001
    rec_weight: float = 1.0
    corr_weight: float = 0.0
    si_balance: float = 0.5
    depth_loss: str = "smooth-l1"
    hidden_act: str = "tanh"
    output_act: str = "identity"
    augment: bool = True
    max_angle: float = 10.0
    holdout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.base_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(rec=self.rec_weight, corr=self.corr_weight, si=self.si_balance)

    @property
    def depth_head(self) -> str:
        return "segmentation" if self.setting == "ss" else "depth"

    def branch_config(self, which: str) -> br.BranchConfig:
        head = "segmentation" if which == "rgb" else self.depth_head
        return br.BranchConfig(feature_channels=self.feature_channels, head=head, n_classes=self.n_classes)

    @property
    def mvae_config(self) -> mv.MvaeConfig:
        return mv.MvaeConfig(self.feature_channels, self.hidden_channels, self.hidden_act, self.output_act)

    # key=value text form
    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, items: dict[str, Any]) -> "TrainConfig":
        kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in items.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind is bool and isinstance(raw, str):
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                out[key] = kind(raw)
        return cls(**out)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Model:
    """Parameters of a (partially) trained network plus the freeze set."""

    config: TrainConfig
    params: dict[str, Variable]
    frozen: set[str] = field(default_factory=set)
    stage: int = 1

    @property
    def has_mvae(self) -> bool:
        return any(k.startswith("mvae.") for k in self.params)

    def to_checkpoint(self, meta: dict | None = None, rng_state=None) -> Checkpoint:
        return Checkpoint(
            {k: v.value.copy() for k, v in self.params.items()},
            set(self.frozen),
            self.config.to_dict(),
            dict(meta or {}, stage=self.stage),
            rng_state,
        )

    @classmethod
    def from_checkpoints(cls, *ckpts: Checkpoint) -> "Model":
        if not ckpts:
            raise ValueError("no checkpoint given")
        config = TrainConfig.from_dict(ckpts[0].config)
        tensors, frozen = {}, set()
        for c in ckpts:
            tensors.update(c.tensors)
            frozen |= c.frozen
        stage = max(int(c.meta.get("stage", 1)) for c in ckpts)
        params = {k: Variable(v, requires_grad=k not in frozen, name=k) for k, v in tensors.items()}
        model = cls(config, params, frozen, stage)
        check_compatible(tensors, {k: v.shape for k, v in expected_params(config, stage, tensors).items()})
        return model


def expected_params(config: TrainConfig, stage: int, present: Iterable[str]) -> dict[str, Variable]:
    """Shapes a model of ``stage`` should carry, restricted to the branches
    present (a stage-one archive holds one branch)."""
    rng = np.random.default_rng(0)
    present = set(present)
    out = {}
    for which in ("rgb", "depth"):
        if any(k.startswith(which + ".") for k in present):
            out.update(br.init_branch(config.branch_config(which), which, rng))
    if stage >= 2:
        out.update(mv.init_mvae(config.feature_channels, config.hidden_channels, rng))
    return out


# -- losses per stage ------------------------------------------------------------


def _head_loss(cfg: TrainConfig, kind: str, out: Variable, batch: Batch) -> Variable:
    if kind == "segmentation":
        return cross_entropy_loss(out, batch.labels)
    return depth_loss(cfg.depth_loss, out, batch.depth, mask=batch.valid, balance=cfg.si_balance)


def _check_finite(value: float, stage: int, it: int, what: str) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"stage {stage}: non-finite {what} at iteration {it}")


def branch_loss(cfg: TrainConfig, params: dict[str, Variable], which: str, batch: Batch) -> Variable:
    bcfg = cfg.branch_config(which)
    image = batch.rgb if which == "rgb" else batch.hha
    feat = br.branch_forward(bcfg, params, which, image)
    out = br.head_forward(bcfg.head, params, which, feat, batch.labels.shape[-2:])
    return _head_loss(cfg, bcfg.head, out, batch)


@dataclass
class Stage1Result:
    rgb: dict[str, Variable]
    depth: dict[str, Variable]
    curve: list[dict[str, Any]]
    rng_state: dict | None = None


def train_stage1(cfg: TrainConfig, dataset: Sequence[Sample]) -> Stage1Result:
    rng = np.random.default_rng([cfg.seed, 1])
    rgb = br.init_branch(cfg.branch_config("rgb"), "rgb", rng)
    depth = br.init_branch(cfg.branch_config("depth"), "depth", rng)
    curve: list[dict[str, Any]] = []
    if cfg.stage1_iters == 0:
        return Stage1Result(rgb, depth, curve, rng.bit_generator.state)
    if cfg.batch_size > len(dataset):
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    opts = {
        "rgb": SGD(rgb, cfg.momentum, cfg.weight_decay),
        "depth": SGD(depth, cfg.momentum, cfg.weight_decay),
    }
    aug_rng = np.random.default_rng([cfg.seed, 11]) if cfg.augment else None
    stream = batch_stream(dataset, cfg.batch_size, np.random.default_rng([cfg.seed, 10]), aug_rng)
    params = {"rgb": rgb, "depth": depth}
    for it in range(cfg.stage1_iters):
        batch = next(stream)
        lr = poly_lr(cfg.base_lr, it, cfg.stage1_iters, cfg.power)
        losses = {}
        for which in ("rgb", "depth"):
            opts[which].zero_grad()
            loss = branch_loss(cfg, params[which], which, batch)
            losses[which] = loss.item()
            _check_finite(losses[which], 1, it, f"{which} branch loss")
            backward(loss)
            opts[which].step(lr)
        curve.append(
            {
                "stage": 1,
                "iteration": it,
                "lr": lr,
                "l_ss_rgb": losses["rgb"],
                "l_d": losses["depth"],
                "l_rec": None,
                "corr": None,
                "total": losses["rgb"] + losses["depth"],
            }
        )
        if it % 200 == 0:
            log.info("stage1 it=%d lr=%.3g rgb=%.4f depth=%.4f", it, lr, losses["rgb"], losses["depth"])
    return Stage1Result(rgb, depth, curve, rng.bit_generator.state)


# -- stage two -------------------------------------------------------------------


def stage2_model(cfg: TrainConfig, rgb_ckpt: Checkpoint | dict, depth_ckpt: Checkpoint | dict) -> Model:
    """Assemble the stage-two network from stage-one branch parameters:
    heads are dropped and re-initialised, encoders frozen, autoencoder new."""
    rng = np.random.default_rng([cfg.seed, 2])
    params: dict[str, Variable] = {}
    for which, src in (("rgb", rgb_ckpt), ("depth", depth_ckpt)):
        if isinstance(src, Checkpoint):
            src = src.tensors
        tensors = {k: (v.value if isinstance(v, Variable) else v) for k, v in src.items()}
        tensors = {k: v for k, v in tensors.items() if k.startswith(which + ".") and br.role_of(k) != "head"}
        expect = br.init_branch(cfg.branch_config(which), which, np.random.default_rng(0))
        expect = {k: v.shape for k, v in expect.items() if br.role_of(k) != "head"}
        check_compatible(tensors, expect)
        for k in expect:
            params[k] = Variable(np.array(tensors[k]), requires_grad=True, name=k)
        params.update(br.init_head(cfg.branch_config(which), which, rng))
    params.update(mv.init_mvae(cfg.feature_channels, cfg.hidden_channels, rng))
    frozen = {k for k in params if k.split(".")[0] in ("rgb", "depth") and br.role_of(k) == "encoder"}
    for k in frozen:
        params[k].requires_grad = False
    return Model(cfg, params, frozen, stage=2)


def features(model: Model, rgb=None, hha=None) -> tuple[Variable | None, Variable | None]:
    cfg = model.config
    xp = br.branch_forward(cfg.branch_config("rgb"), model.params, "rgb", rgb) if rgb is not None else None
    dp = br.branch_forward(cfg.branch_config("depth"), model.params, "depth", hha) if hha is not None else None
    return xp, dp


def stage2_losses(model: Model, batch: Batch) -> dict[str, Variable]:
    cfg = model.config
    p = model.params
    xp, dp = features(model, batch.rgb, batch.hha)
    hidden = mv.encode_joint(p, xp, dp, cfg.hidden_act)
    xr, dr = mv.decode(p, hidden, cfg.output_act)
    size = batch.labels.shape[-2:]
    l_rgb = cross_entropy_loss(br.segmentation_head(p, "rgb", xr, size), batch.labels)
    l_d = _head_loss(cfg, cfg.depth_head, br.head_forward(cfg.depth_head, p, "depth", dr, size), batch)
    l_rec = mv.reconstruction_loss(p, xp, dp, cfg.hidden_act, cfg.output_act)
    hx = mv.encode_single(p, xp, "rgb", cfg.hidden_act)
    hd = mv.encode_single(p, dp, "depth", cfg.hidden_act)
    corr = mv.correlation(hx, hd) if len(batch) >= 2 else Variable(0.0)
    total = total_objective(l_rgb, l_d, l_rec, corr, cfg.weights)
    return {"l_ss_rgb": l_rgb, "l_d": l_d, "l_rec": l_rec, "corr": corr, "total": total}


@dataclass
class Stage2Result:
    model: Model
    curve: list[dict[str, Any]]
    frozen_intact: bool
    rng_state: dict | None = None


def _frozen_bytes(model: Model) -> dict[str, bytes]:
    return {k: model.params[k].value.tobytes() for k in sorted(model.frozen)}


def train_stage2(cfg: TrainConfig, dataset: Sequence[Sample], rgb_ckpt, depth_ckpt, check_every: int = 100) -> Stage2Result:
    model = stage2_model(cfg, rgb_ckpt, depth_ckpt)
    reference = _frozen_bytes(model)
    curve: list[dict[str, Any]] = []
    if cfg.stage2_iters and cfg.batch_size > len(dataset):
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    opt = Adam(model.params, weight_decay=cfg.weight_decay, frozen=model.frozen)
    aug_rng = np.random.default_rng([cfg.seed, 21]) if cfg.augment else None
    stream = batch_stream(dataset, cfg.batch_size, np.random.default_rng([cfg.seed, 20]), aug_rng)
    weights = cfg.weights
    for it in range(cfg.stage2_iters):
        batch = next(stream)
        lr = poly_lr(cfg.stage2_lr, it, cfg.stage2_iters, cfg.power)
        opt.zero_grad()
        terms = stage2_losses(model, batch)
        row = {k: v.item() for k, v in terms.items()}
        _check_finite(row["total"], 2, it, "objective")
        recomputed = total_objective_value(row["l_ss_rgb"], row["l_d"], row["l_rec"], row["corr"], weights)
        if abs(recomputed - row["total"]) > 1e-12 * max(1.0, abs(recomputed)):
            raise AssertionError(f"objective accounting mismatch at iteration {it}")
        backward(terms["total"])
        opt.step(lr)
        curve.append({"stage": 2, "iteration": it, "lr": lr, **row})
        if (it + 1) % check_every == 0 and _frozen_bytes(model) != reference:
            raise AssertionError(f"frozen encoder tensors changed by iteration {it}")
        if it % 200 == 0:
            log.info("stage2 it=%d lr=%.3g %s", it, lr, " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    intact = _frozen_bytes(model) == reference
    return Stage2Result(model, curve, intact, None)


# -- prediction ------------------------------------------------------------------


@dataclass
class Prediction:
    seg_logits: np.ndarray | None
    depth: np.ndarray | None
    recon: tuple[np.ndarray, np.ndarray] | None
    hidden: np.ndarray | None = None
    feats: tuple[np.ndarray | None, np.ndarray | None] = (None, None)


def fuse_logits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """RGB+D segmentation: per-pixel average of the two heads' logits."""
    return 0.5 * (a + b)


def _batched(x):
    if x is None:
        return None
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def predict(model: Model, rgb=None, hha=None) -> Prediction:
    """Run the network on whichever views are supplied.

    With the autoencoder present, the hidden code comes from the joint
    encoder when both views are given and from the single-view encoder
    otherwise; both reconstructions are always decoded.  The RGB head reads
    x^r and the depth head d^r.  Segmentation in the SS setting uses the
    head of the supplied view, averaging the two when both are given; in the
    SS-D setting it always comes from the RGB head and depth from the depth
    head.  Without the autoencoder (stage one) the branch heads are applied
    to their own features and a missing view yields no output for it.
    """
    if rgb is None and hha is None:
        raise ValueError("at least one view (rgb or hha) is required")
    cfg = model.config
    rgb, hha = _batched(rgb), _batched(hha)
    size = (rgb if rgb is not None else hha).shape[-2:]
    p = model.params
    with no_grad():
        xp, dp = features(model, rgb, hha)
        feats = (None if xp is None else xp.value, None if dp is None else dp.value)
        if model.has_mvae:
            hidden = mv.encode(p, xp, dp, cfg.hidden_act)
            xr, dr = mv.decode(p, hidden, cfg.output_act)
            rgb_out = br.segmentation_head(p, "rgb", xr, size).value
            d_out = br.head_forward(cfg.depth_head, p, "depth", dr, size).value
            recon, hid = (xr.value, dr.value), hidden.value
        else:
            rgb_out = br.segmentation_head(p, "rgb", xp, size).value if xp is not None else None
            d_out = br.head_forward(cfg.depth_head, p, "depth", dp, size).value if dp is not None else None
            recon, hid = None, None
    if cfg.setting == "ssd":
        return Prediction(rgb_out, d_out, recon, hid, feats)
    if rgb is not None and hha is not None:
        seg = fuse_logits(rgb_out, d_out)
    elif rgb is not None:
        seg = rgb_out
    else:
        seg = d_out
    return Prediction(seg, None, recon, hid, feats)


def views_arrays(batch: Batch, views: str):
    if views not in VIEWS:
        raise ValueError(f"views must be one of {VIEWS}")
    return (batch.rgb if views in ("rgb", "both") else None, batch.hha if views in ("depth", "both") else None)


def evaluate(model: Model, samples: Sequence[Sample], views: str, chunk: int = 16) -> dict[str, Any]:
    """Mean IoU (+ per class), depth RMSE where the setting predicts depth,
    and the loss components averaged over chunks."""
    cfg = model.config
    conf = ConfusionMatrix(cfg.n_classes)
    sq, count = [], 0
    loss_sums: dict[str, float] = {}
    n_chunks = 0
    for start in range(0, len(samples), chunk):
        batch = collate(samples[start : start + chunk])
        rgb, hha = views_arrays(batch, views)
        pred = predict(model, rgb, hha)
        if pred.seg_logits is not None:
            conf.update(pred.seg_logits.argmax(axis=1) + 1, batch.labels)
        if pred.depth is not None:
            r = (pred.depth - batch.depth)[batch.valid]
            sq.append(r)
            count += r.size
        if model.has_mvae:
            with no_grad():
                terms = stage2_losses(model, batch)
            for k, v in terms.items():
                loss_sums[k] = loss_sums.get(k, 0.0) + v.item()
            n_chunks += 1
    out: dict[str, Any] = {"setting": cfg.setting, "views": views, "n_samples": len(samples)}
    if conf.total:
        per_class, mean = iou(conf)
        out["mean_iou"], out["per_class_iou"] = mean, per_class
    else:
        out["mean_iou"], out["per_class_iou"] = None, None
    if sq:
        r = np.concatenate(sq)
        out["rmse"] = rmse(r, np.zeros_like(r))
    else:
        out["rmse"] = None
    for k in ("l_ss_rgb", "l_d", "l_rec", "total"):
        out[k] = loss_sums[k] / n_chunks if n_chunks else None
    return out


def metrics_header(n_classes: int) -> list[str]:
    return (
        ["setting", "views", "n_samples", "mean_iou"]
        + [f"iou_{c}" for c in range(1, n_classes + 1)]
        + ["rmse", "l_ss_rgb", "l_d", "l_rec", "total"]
    )


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_row(result: dict[str, Any], n_classes: int) -> list[str]:
    per = result.get("per_class_iou")
    per = [None] * n_classes if per is None else list(per)
    return (
        [result["setting"], result["views"], str(result["n_samples"]), _cell(result["mean_iou"])]
        + [_cell(v) for v in per]
        + [_cell(result[k]) for k in ("rmse", "l_ss_rgb", "l_d", "l_rec", "total")]
    )


def curve_csv(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([_cell(r.get(k)) if k not in ("stage", "iteration") else r[k] for k in CURVE_COLUMNS])
    return buf.getvalue()


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what exists."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


__all__ = [
    "CheckpointError",
    "Model",
    "TrainConfig",
    "evaluate",
    "predict",
    "train_stage1",
    "train_stage2",
]
