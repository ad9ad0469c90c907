"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .training import VIEWS


def check_views(views: str | None, n_channels: int) -> str:
    if views is None:
        views = {6: "both", 3: "rgb"}.get(n_channels)
        if views is None:
            raise ValueError(f"cannot infer views from {n_channels} channels; pass views=")
    if views not in VIEWS:
        raise ValueError(f"views must be one of {VIEWS}, got {views!r}")
    want = 6 if views == "both" else 3
    if n_channels != want:
        raise ValueError(f"views={views!r} expects {want} channels, got {n_channels}")
    return views


def check_rgbd(X, views: str | None = None, downsample: int = 4) -> tuple[np.ndarray | None, np.ndarray | None, str]:
    """Split ``N x C x H x W`` input into (rgb, hha) according to ``views``.

    ``C`` is 6 (rgb then hha) for both views and 3 for a single view.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    h, w = X.shape[-2:]
    if h % downsample or w % downsample:
        raise ValueError(f"image size {h}x{w} must be divisible by {downsample}")
    views = check_views(views, X.shape[1])
    if views == "both":
        return X[:, :3], X[:, 3:], views
    if views == "rgb":
        return X, None, views
    return None, X, views


def check_labels(y, n_samples: int, n_classes: int, size: tuple[int, int]) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,) + tuple(size):
        raise ValueError(f"labels shape {y.shape} does not match {(n_samples,) + tuple(size)}")
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() > n_classes:
        raise ValueError(f"labels must lie in 0..{n_classes} (0 = ignore)")
    return y


def check_depth(depth, n_samples: int, size: tuple[int, int]) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != (n_samples,) + tuple(size):
        raise ValueError(f"depth shape {d.shape} does not match {(n_samples,) + tuple(size)}")
    if not np.all(d > 0):
        raise ValueError("depth must be strictly positive")
    return d
