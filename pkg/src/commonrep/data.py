"""Synthetic paired RGB-D scenes, simplified HHA, paired augmentation,
batching and the on-disk dataset layout."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensorio

IGNORE = 0
BACKGROUND = 1


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def default(cls, h: int, w: int) -> "Intrinsics":
        f = 1.2 * max(h, w)
        return cls(f, f, (w - 1) / 2.0, (h - 1) / 2.0)


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 32
    n_classes: int = 5
    objects: tuple[int, int] = (1, 4)
    intrinsics: Intrinsics | None = None
    downsample: int = 4

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need K >= 2 classes (background plus at least one object class)")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError(f"image size must be divisible by {self.downsample}")
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object count range {self.objects}")
        if self.intrinsics is None:
            self.intrinsics = Intrinsics.default(self.height, self.width)


@dataclass
class Sample:
    """One paired observation.  ``rgb`` is 3 x H x W, ``hha`` 3 x H x W in
    [0, 1], ``depth`` H x W metres, ``labels`` H x W in 0..K (0 = ignore)."""

    rgb: np.ndarray
    hha: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    id: str = ""
    normalized: bool = True

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape

    def arrays(self) -> dict[str, np.ndarray]:
        return {"rgb": self.rgb, "hha": self.hha, "labels": self.labels, "depth": self.depth}


@dataclass
class SceneObject:
    cls: int
    shape: str  # "rect" | "ellipse" | "background"
    center: tuple[float, float]
    half: tuple[float, float]
    depth: float
    gradient: tuple[float, float]
    color: tuple[float, float, float]

    def covers(self, v: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.shape == "background":
            return np.ones(np.broadcast(v, u).shape, dtype=bool)
        dv = (v - self.center[0]) / self.half[0]
        du = (u - self.center[1]) / self.half[1]
        if self.shape == "rect":
            return (np.abs(dv) <= 1.0) & (np.abs(du) <= 1.0)
        return dv * dv + du * du <= 1.0

    def depth_at(self, v: np.ndarray, u: np.ndarray, h: int, w: int) -> np.ndarray:
        return self.depth + self.gradient[0] * (v - self.center[0]) / h + self.gradient[1] * (u - self.center[1]) / w


def class_color(c: int) -> np.ndarray:
    """Fixed, well separated base colour per class, in 0..255."""
    hue = (0.61803398875 * c) % 1.0
    rgb = np.array([abs(math.sin(math.pi * (hue + o))) for o in (0.0, 1 / 3, 2 / 3)])
    return 40.0 + 180.0 * rgb


def scene_objects(spec: SceneSpec, index: int) -> list[SceneObject]:
    """Background first, then the foreground objects; deterministic in
    (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    bg = SceneObject(
        BACKGROUND,
        "background",
        ((h - 1) / 2.0, (w - 1) / 2.0),
        (h, w),
        float(rng.uniform(4.0, 5.0)),
        (float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.8, 0.8))),
        tuple(class_color(BACKGROUND) + rng.normal(0, 8, 3)),
    )
    objs = [bg]
    lo, hi = spec.objects
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(2, spec.n_classes + 1))
        # class-linked depth band gives the depth view some semantic signal
        band = 1.0 + 2.2 * (cls - 2) / max(1, spec.n_classes - 2)
        objs.append(
            SceneObject(
                cls,
                "rect" if rng.random() < 0.5 else "ellipse",
                (float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1))),
                (float(rng.uniform(h / 8, h / 3)), float(rng.uniform(w / 8, w / 3))),
                float(band + rng.uniform(-0.3, 0.3)),
                (float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5))),
                tuple(class_color(cls) + rng.normal(0, 12, 3)),
            )
        )
    return objs


def render(objs: Sequence[SceneObject], spec: SceneSpec, noise_seed: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Z-buffer the objects into raw rgb (0..255), depth and labels."""
    h, w = spec.height, spec.width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    depth = np.full((h, w), np.inf)
    labels = np.zeros((h, w), dtype=np.int64)
    rgb = np.zeros((3, h, w))
    for obj in objs:
        z = obj.depth_at(v, u, h, w)
        win = obj.covers(v, u) & (z < depth)
        depth[win] = z[win]
        labels[win] = obj.cls
        rgb[:, win] = np.asarray(obj.color)[:, None]
    rng = np.random.default_rng(list(noise_seed))
    rgb = np.clip(rgb + rng.normal(0, 6, rgb.shape), 0.0, 255.0)
    return rgb, depth, labels


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    objs = scene_objects(spec, index)
    rgb, depth, labels = render(objs, spec, (spec.seed, index, 1))
    raw = Sample(rgb, hha_encode(depth, spec.intrinsics), labels, depth, id=f"s{index:05d}", normalized=False)
    return normalize(raw)


def generate_dataset(spec: SceneSpec, count: int) -> list[Sample]:
    return [generate_scene(spec, i) for i in range(count)]


# -- HHA -------------------------------------------------------------------


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def surface_normals(points: np.ndarray) -> np.ndarray:
    """Unit normals (3 x H x W) from a back-projected point map, oriented
    toward the camera."""
    pv = np.gradient(points, axis=1)
    pu = np.gradient(points, axis=2)
    n = np.cross(pu, pv, axis=0)
    norm = np.linalg.norm(n, axis=0)
    flat = norm == 0
    n = np.where(flat, np.array([0.0, 0.0, -1.0])[:, None, None], n / np.where(flat, 1.0, norm))
    toward = np.sum(n * points, axis=0) > 0
    return np.where(toward, -n, n)


def hha_encode(depth: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Disparity, height and normal-to-gravity angle, each in [0, 1].

    Camera axes are x right, y down, z forward; gravity is fixed to +y (the
    image's downward direction) and height is measured against it.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        bad = tuple(int(i) for i in np.argwhere(depth <= 0)[0])
        raise ValueError(f"depth must be positive (pixel {bad})")
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - intrinsics.cx) * depth / intrinsics.fx
    y = (v - intrinsics.cy) * depth / intrinsics.fy
    points = np.stack([x, y, depth])
    normals = surface_normals(points)
    gravity = np.array([0.0, 1.0, 0.0])
    cosang = np.clip(np.tensordot(gravity, normals, axes=1), -1.0, 1.0)
    return np.stack(
        [
            _minmax(1.0 / depth),
            _minmax(-y),
            np.arccos(cosang) / np.pi,
        ]
    )


def normalize(sample: Sample) -> Sample:
    """Map raw 0..255 rgb to [-0.5, 0.5]; no-op on normalized samples."""
    if sample.normalized:
        return sample
    return replace(sample, rgb=sample.rgb / 255.0 - 0.5, hha=np.clip(sample.hha, 0.0, 1.0), normalized=True)


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class PairedTransform:
    flip: bool
    angle_deg: float

    def source_coords(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """For each output pixel, the (row, col) it samples from."""
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        if self.angle_deg != 0.0:
            cv, cu = (h - 1) / 2.0, (w - 1) / 2.0
            t = math.radians(self.angle_deg)
            c, s = math.cos(t), math.sin(t)
            dv, du = v - cv, u - cu
            v, u = cv + c * dv + s * du, cu - s * dv + c * du
        if self.flip:
            u = (w - 1) - u
        return v, u


def _bilinear(img: np.ndarray, sv: np.ndarray, su: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    sv = np.clip(sv, 0, h - 1)
    su = np.clip(su, 0, w - 1)
    v0 = np.minimum(np.floor(sv).astype(np.intp), max(h - 2, 0))
    u0 = np.minimum(np.floor(su).astype(np.intp), max(w - 2, 0))
    v1 = np.minimum(v0 + 1, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    fv, fu = sv - v0, su - u0
    return (
        img[..., v0, u0] * (1 - fv) * (1 - fu)
        + img[..., v0, u1] * (1 - fv) * fu
        + img[..., v1, u0] * fv * (1 - fu)
        + img[..., v1, u1] * fv * fu
    )


def apply_transform(sample: Sample, tf: PairedTransform) -> Sample:
    """Warp all four arrays with one shared spatial map.

    Continuous channels are resampled bilinearly, labels by nearest
    neighbour.  Pixels whose source falls outside the image get the ignore
    label (and zeros in rgb/hha; depth is edge-clamped so it stays positive).
    """
    h, w = sample.size
    if not tf.flip and tf.angle_deg == 0.0:
        return sample
    if tf.angle_deg == 0.0:
        flip = lambda a: np.ascontiguousarray(a[..., ::-1])  # noqa: E731
        return replace(sample, rgb=flip(sample.rgb), hha=flip(sample.hha), labels=flip(sample.labels), depth=flip(sample.depth))
    sv, su = tf.source_coords(h, w)
    tol = 1e-9
    inside = (sv >= -tol) & (sv <= h - 1 + tol) & (su >= -tol) & (su <= w - 1 + tol)
    rgb = np.where(inside, _bilinear(sample.rgb, sv, su), 0.0)
    hha = np.where(inside, _bilinear(sample.hha, sv, su), 0.0)
    depth = _bilinear(sample.depth, sv, su)
    nv = np.clip(np.rint(sv).astype(np.intp), 0, h - 1)
    nu = np.clip(np.rint(su).astype(np.intp), 0, w - 1)
    labels = np.where(inside, sample.labels[nv, nu], IGNORE)
    return replace(sample, rgb=rgb, hha=hha, labels=labels, depth=depth)


def random_transform(rng: np.random.Generator, max_angle: float = 10.0) -> PairedTransform:
    flip = bool(rng.random() < 0.5)
    return PairedTransform(flip, float(rng.uniform(-max_angle, max_angle)))


def augment(sample: Sample, rng: np.random.Generator, max_angle: float = 10.0) -> Sample:
    """Random horizontal flip (p = 1/2) and rotation in [-max_angle, max_angle]
    degrees, identical for both views and the targets."""
    return apply_transform(sample, random_transform(rng, max_angle))


# -- batching ------------------------------------------------------------------


@dataclass
class Batch:
    rgb: np.ndarray
    hha: np.ndarray
    labels: np.ndarray
    depth: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def valid(self) -> np.ndarray:
        return self.labels != IGNORE


def collate(samples: Sequence[Sample]) -> Batch:
    return Batch(
        np.stack([s.rgb for s in samples]),
        np.stack([s.hha for s in samples]),
        np.stack([s.labels for s in samples]),
        np.stack([s.depth for s in samples]),
        [s.id for s in samples],
    )


def make_batches(
    dataset: Sequence[Sample], batch_size: int, rng: np.random.Generator, augment_rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    """One shuffled epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        chunk = [dataset[i] for i in order[start : start + batch_size]]
        if augment_rng is not None:
            chunk = [augment(s, augment_rng) for s in chunk]
        yield collate(chunk)


def batch_stream(
    dataset: Sequence[Sample], batch_size: int, rng: np.random.Generator, augment_rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    while True:
        yield from make_batches(dataset, batch_size, rng, augment_rng)


# -- on-disk layout --------------------------------------------------------------

HEADER = "header.txt"
MANIFEST = "manifest.jsonl"
ARRAY_NAMES = ("rgb", "hha", "labels", "depth")


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path: str | os.PathLike, items: dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def save_dataset(root: str | os.PathLike, samples: Sequence[Sample], spec: SceneSpec) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_kv(
        root / HEADER,
        {"H": spec.height, "W": spec.width, "K": spec.n_classes, "seed": spec.seed, "count": len(samples)},
    )
    lines = []
    for s in samples:
        record = {"id": s.id}
        for name, arr in s.arrays().items():
            fname = f"{s.id}.{name}.crtf"
            tensorio.save(root / fname, arr.astype(np.float64))
            record[name] = fname
        lines.append(json.dumps(record, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(root: str | os.PathLike) -> tuple[dict[str, str], list[Sample]]:
    root = Path(root)
    if not (root / HEADER).exists():
        raise FileNotFoundError(f"{root} has no {HEADER}; not a dataset directory")
    header = read_kv(root / HEADER)
    samples = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        arrs = {name: tensorio.load(root / rec[name]) for name in ARRAY_NAMES}
        samples.append(
            Sample(arrs["rgb"], arrs["hha"], arrs["labels"].astype(np.int64), arrs["depth"], id=rec["id"])
        )
    if len(samples) != int(header["count"]):
        raise ValueError(f"manifest lists {len(samples)} samples, header says {header['count']}")
    return header, samples


def split(samples: Sequence[Sample], holdout: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split: the trailing ``holdout`` fraction is held out."""
    n_test = int(round(len(samples) * holdout))
    n_train = len(samples) - n_test
    return list(samples[:n_train]), list(samples[n_train:])
