"""Grayscale PGM dumps of intermediate maps."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import mvae as mv
from .autodiff import no_grad
from .training import Model, features, predict

# file name -> what it shows
MAP_FILES = {
    "input_rgb.pgm": "rgb input, channel mean",
    "input_hha.pgm": "HHA input, channel mean",
    "feat_rgb.pgm": "RGB branch feature map x^p",
    "feat_depth.pgm": "depth branch feature map d^p",
    "hidden_rgb.pgm": "hidden code from the RGB view alone",
    "hidden_depth.pgm": "hidden code from the depth view alone",
    "hidden_joint.pgm": "hidden code from both views",
    "recon_rgb.pgm": "reconstructed RGB feature map x^r",
    "recon_depth.pgm": "reconstructed depth feature map d^r",
    "pred_seg.pgm": "predicted label map",
    "pred_depth.pgm": "predicted depth (SS-D only)",
}


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Average leading channels, min-max scale to 0..255 (constant maps -> 0)."""
    a = np.asarray(arr, dtype=np.float64)
    while a.ndim > 2:
        a = a.mean(axis=0)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str | os.PathLike, arr: np.ndarray) -> None:
    g = to_gray(arr)
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def dump_maps(model: Model, rgb: np.ndarray | None, hha: np.ndarray | None, out_dir: str | os.PathLike) -> list[str]:
    """Write one PGM per available map; returns the file names written."""
    if not model.has_mvae:
        raise ValueError("inspection needs a stage-two checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg, p = model.config, model.params
    rgb = None if rgb is None else np.asarray(rgb)[None]
    hha = None if hha is None else np.asarray(hha)[None]
    maps: dict[str, np.ndarray] = {}
    with no_grad():
        xp, dp = features(model, rgb, hha)
        if rgb is not None:
            maps["input_rgb.pgm"] = rgb[0]
            maps["feat_rgb.pgm"] = xp.value[0]
            maps["hidden_rgb.pgm"] = mv.encode_single(p, xp, "rgb", cfg.hidden_act).value[0]
        if hha is not None:
            maps["input_hha.pgm"] = hha[0]
            maps["feat_depth.pgm"] = dp.value[0]
            maps["hidden_depth.pgm"] = mv.encode_single(p, dp, "depth", cfg.hidden_act).value[0]
        if rgb is not None and hha is not None:
            maps["hidden_joint.pgm"] = mv.encode_joint(p, xp, dp, cfg.hidden_act).value[0]
    pred = predict(model, rgb, hha)
    maps["recon_rgb.pgm"] = pred.recon[0][0]
    maps["recon_depth.pgm"] = pred.recon[1][0]
    maps["pred_seg.pgm"] = pred.seg_logits[0].argmax(axis=0).astype(np.float64)
    if pred.depth is not None:
        maps["pred_depth.pgm"] = pred.depth[0]
    names = [n for n in MAP_FILES if n in maps]
    for name in names:
        write_pgm(out / name, maps[name])
    return names
