"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .checkpoint import load_checkpoint, save_checkpoint
from .data import HEADER, SceneSpec, generate_dataset, load_dataset, read_kv, save_dataset, split, write_kv
from .gradcheck import TOLERANCE, run_gradcheck
from .inspect_maps import dump_maps
from .training import (
    Model,
    TrainConfig,
    curve_csv,
    evaluate,
    metrics_header,
    metrics_row,
    predict,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("commonrep")

MANIFEST_NAME = "run_manifest.txt"


class UsageError(Exception):
    pass


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def header_hash(data_dir: str | os.PathLike) -> str:
    """Git blob hash of the dataset header file."""
    raw = (Path(data_dir) / HEADER).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


PATH_ARGS = ("out", "data", "config", "init", "checkpoint")


def _rel(p: str, base: Path) -> str:
    # paths are stored relative to the manifest so that relocated runs compare equal
    return os.path.relpath(os.path.abspath(p), os.path.abspath(base))


def write_manifest(path: Path, command: str, args: argparse.Namespace, config: dict | None = None,
                   data_dir: str | None = None, outputs: list[str] | None = None, started: str = "") -> None:
    items: dict[str, object] = {"command": command, "version": __version__}
    for k, v in sorted(vars(args).items()):
        if k in PATH_ARGS and v is not None:
            v = ",".join(_rel(x, path.parent) for x in ([v] if isinstance(v, str) else v))
        if k != "func":
            items[f"arg.{k}"] = v
    for k, v in (config or {}).items():
        items[f"config.{k}"] = v
    if data_dir is not None:
        items["data_header_hash"] = header_hash(data_dir)
    if outputs:
        items["outputs"] = ",".join(outputs)
    items["started"] = started
    items["finished"] = _timestamp()
    write_kv(path, items)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")


def _parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"object range must be N or LO-HI, got {text!r}") from None


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = _timestamp()
    if args.classes < 2:
        raise UsageError("--classes must be at least 2 (background plus one object class)")
    if args.count < 1:
        raise UsageError("--count must be positive")
    h, w = args.size
    try:
        spec = SceneSpec(seed=args.seed, height=h, width=w, n_classes=args.classes, objects=args.objects)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = generate_dataset(spec, args.count)
    save_dataset(args.out, samples, spec)
    write_manifest(Path(args.out) / MANIFEST_NAME, "gen-data", args, data_dir=args.out, started=started)
    print(f"wrote {args.count} samples, K={args.classes}, {h}x{w} to {args.out}")
    return 0


def _train_config(args, header: dict[str, str]) -> TrainConfig:
    items: dict[str, str] = {}
    if args.config:
        items.update(read_kv(args.config))
    items["n_classes"] = header["K"]
    if args.setting:
        items["setting"] = args.setting
    for flag in ("seed", "stage1_iters", "stage2_iters", "batch_size"):
        val = getattr(args, flag)
        if val is not None:
            items[flag] = str(val)
    for kv in args.set or []:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        items[key.strip()] = value.strip()
    try:
        return TrainConfig.from_dict(items)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    started = _timestamp()
    header, samples = load_dataset(args.data)
    cfg = _train_config(args, header)
    train_set, _ = split(samples, cfg.holdout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    meta = {"data_header_hash": header_hash(args.data), "n_train": len(train_set)}
    if args.stage in ("1", "all"):
        s1 = train_stage1(cfg, train_set)
        for which, params in (("rgb", s1.rgb), ("depth", s1.depth)):
            model = Model(cfg, params, set(), stage=1)
            name = f"stage1_{which}.ckpt"
            save_checkpoint(out / name, model.to_checkpoint(dict(meta, branch=which), s1.rng_state))
            outputs.append(name)
        rows += s1.curve
        rgb_src, depth_src = s1.rgb, s1.depth
    if args.stage in ("2", "all"):
        if args.stage == "2":
            init = Path(args.init or args.out)
            rgb_src = load_checkpoint(init / "stage1_rgb.ckpt")
            depth_src = load_checkpoint(init / "stage1_depth.ckpt")
        s2 = train_stage2(cfg, train_set, rgb_src, depth_src)
        if not s2.frozen_intact:
            raise RuntimeError("frozen encoder parameters changed during stage 2")
        save_checkpoint(out / "stage2.ckpt", s2.model.to_checkpoint(meta))
        outputs.append("stage2.ckpt")
        rows += s2.curve
    (out / "loss.csv").write_text(curve_csv(rows))
    outputs.append("loss.csv")
    write_manifest(out / MANIFEST_NAME, "train", args, cfg.to_dict(), args.data, outputs, started)
    print(f"trained stage {args.stage} ({cfg.setting}); outputs in {out}")
    return 0


def _load_model(paths: list[str]) -> Model:
    return Model.from_checkpoints(*(load_checkpoint(p) for p in paths))


def _eval_split(samples, holdout: float, which: str):
    train, test = split(samples, holdout)
    return {"test": test, "train": train, "all": list(samples)}[which]


def cmd_eval(args) -> int:
    started = _timestamp()
    model = _load_model(args.checkpoint)
    _, samples = load_dataset(args.data)
    subset = _eval_split(samples, model.config.holdout, args.split)
    if not subset:
        raise RuntimeError(f"the {args.split!r} split is empty")
    result = evaluate(model, subset, args.views)
    k = model.config.n_classes
    head, row = metrics_header(k), metrics_row(result, k)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(head)
    w.writerow(row)
    if args.out:
        path = Path(args.out)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            cw = csv.writer(f, lineterminator="\n")
            if new:
                cw.writerow(head)
            cw.writerow(row)
        write_manifest(path.with_name(path.name + ".manifest.txt"), "eval", args, model.config.to_dict(),
                       args.data, [path.name], started)
    return 0


def _find_sample(samples, sample_id: str):
    for s in samples:
        if s.id == sample_id:
            return s
    raise RuntimeError(f"no sample with id {sample_id!r}")


def cmd_inspect(args) -> int:
    started = _timestamp()
    model = _load_model(args.checkpoint)
    _, samples = load_dataset(args.data)
    s = _find_sample(samples, args.sample_id)
    rgb = s.rgb if args.views in ("rgb", "both") else None
    hha = s.hha if args.views in ("depth", "both") else None
    names = dump_maps(model, rgb, hha, args.out)
    write_manifest(Path(args.out) / MANIFEST_NAME, "inspect", args, model.config.to_dict(), args.data, names, started)
    for n in names:
        print(n)
    return 0


def cmd_predict(args) -> int:
    started = _timestamp()
    model = _load_model(args.checkpoint)
    _, samples = load_dataset(args.data)
    s = _find_sample(samples, args.sample_id)
    rgb = s.rgb if args.views in ("rgb", "both") else None
    hha = s.hha if args.views in ("depth", "both") else None
    pred = predict(model, rgb, hha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    if pred.seg_logits is not None:
        tensorio.save(out / f"{s.id}.seg_logits.crtf", pred.seg_logits[0])
        tensorio.save(out / f"{s.id}.labels.crtf", (pred.seg_logits[0].argmax(axis=0) + 1).astype(np.float64))
        names += [f"{s.id}.seg_logits.crtf", f"{s.id}.labels.crtf"]
    if pred.depth is not None:
        tensorio.save(out / f"{s.id}.depth.crtf", pred.depth[0])
        names.append(f"{s.id}.depth.crtf")
    write_manifest(out / MANIFEST_NAME, "predict", args, model.config.to_dict(), args.data, names, started)
    for n in names:
        print(n)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    reports = run_gradcheck(seed=args.seed, points=args.points)
    worst_name = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{worst_name}}  {r.worst:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed (tolerance {TOLERANCE:g}) in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="commonrep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired RGB-D dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=_parse_size, default=(32, 32), help="N or HxW (default 32)")
    g.add_argument("--classes", type=int, default=5, help="K, background included")
    g.add_argument("--objects", type=_parse_range, default=(1, 4), help="objects per scene, LO-HI")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--setting", choices=["ss", "ssd"])
    t.add_argument("--stage", choices=["1", "2", "all"], default="all")
    t.add_argument("--config", help="key=value file mirroring TrainConfig")
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="directory holding stage-1 checkpoints (for --stage 2; default --out)")
    t.add_argument("--seed", type=int)
    t.add_argument("--stage1-iters", type=int)
    t.add_argument("--stage2-iters", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics row for one view availability")
    e.add_argument("--checkpoint", required=True, action="append", help="repeat to combine stage-1 branches")
    e.add_argument("--data", required=True)
    e.add_argument("--views", choices=["rgb", "depth", "both"], default="both")
    e.add_argument("--split", choices=["test", "train", "all"], default="test")
    e.add_argument("--out", help="append the row to this CSV")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump intermediate maps as PGM images")
    i.add_argument("--checkpoint", required=True, action="append")
    i.add_argument("--data", required=True)
    i.add_argument("--sample-id", required=True)
    i.add_argument("--views", choices=["rgb", "depth", "both"], default="both")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)

    pr = sub.add_parser("predict", help="write predictions for one sample as CRTF tensors")
    pr.add_argument("--checkpoint", required=True, action="append")
    pr.add_argument("--data", required=True)
    pr.add_argument("--sample-id", required=True)
    pr.add_argument("--views", choices=["rgb", "depth", "both"], default="both")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--points", type=int, default=10)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
