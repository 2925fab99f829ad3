"""Command-line entry point: ``icogauge {grid,check,bench,mnist}``.

Exit codes: 0 success, 1 a check or tolerance failed, 2 usage error,
3 input/output or file-format error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import FormatError, IcoError
from .fields import FieldType, random_signal
from .geometry import MAX_RESOLUTION, build_atlas, build_grid, build_symmetry_group, chart_shape, export_json, num_pixels

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
BENCH_HEADER = ("r", "pixels", "batch", "seconds_per_call", "seconds_per_sample", "memory_bytes_per_sample")


def _threads(value: str | None) -> int:
    raw = value if value is not None else os.environ.get("ICOGAUGE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be at least 1")
    return n


def _resolution(text: str) -> int:
    r = int(text)
    if not 0 <= r <= MAX_RESOLUTION:
        raise argparse.ArgumentTypeError(f"resolution must lie in 0..{MAX_RESOLUTION}")
    return r


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# --------------------------------------------------------------------------
# grid


def cmd_grid(args) -> int:
    grid = build_grid(args.res)
    atlas = build_atlas(grid)
    group = None if args.no_group else build_symmetry_group(grid, atlas)
    doc = export_json(grid, atlas, group)
    with open(args.out, "w") as fh:
        fh.write(doc)
    h, w = chart_shape(args.res)
    print(f"N={grid.num_pixels}")
    print(f"corners={len(grid.corners)}")
    print(f"chart={h}x{w} stacked={5 * h}x{w}")
    print(f"padding_records={len(atlas.padding)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    from .checks import SUITES, run_suite

    suites = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for name in suites:
        t0 = time.perf_counter()
        rows = run_suite(name, tuple(args.res) if args.res else None, args.seed)
        for row in rows:
            print(row.line())
            ok &= row.ok
        worst = max((r.value / r.tol if r.tol else r.value) for r in rows) if rows else 0.0
        print(f"suite {name}: {'PASS' if all(r.ok for r in rows) else 'FAIL'} "
              f"({len(rows)} checks, worst value/tolerance {worst:.3g}, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# bench


def bench_rows(res_min: int, res_max: int, reps: int, fields: int = 12, budget_mb: float = 512, seed: int = 0):
    """Time one regular-to-regular gconv per resolution, normalised by batch size."""
    from .ops import gconv

    ft = FieldType.regular(fields)
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(fields, ft.total_channels, 7)).astype(np.float32)
    rows = []
    for r in range(res_min, res_max + 1):
        grid = build_grid(r)
        atlas = build_atlas(grid)
        h, wd = chart_shape(r)
        plane = 5 * h * wd
        interior = 5 * 2 ** (2 * r + 1)
        c = ft.total_channels
        # input, padded copy, im2col columns and output, 4 bytes each
        per_sample = 4 * c * (3 * plane + 7 * interior)
        batch = max(1, int(budget_mb * 2**20 // per_sample))
        x = random_signal(grid, atlas, ft, batch, seed, dtype=np.float32)
        gconv(x, w, ft, ft, 1, atlas=atlas)  # warm-up
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            gconv(x, w, ft, ft, 1, atlas=atlas)
            times.append(time.perf_counter() - t0)
        mean = float(np.mean(times))
        rows.append((r, num_pixels(r), batch, mean, mean / batch, per_sample))
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.res_min, args.res_max, args.reps, args.fields, args.budget_mb, args.seed)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(BENCH_HEADER)
        for row in rows:
            wr.writerow(row)
    for i, row in enumerate(rows):
        ratio = f"  ratio {row[4] / rows[i - 1][4]:.2f}" if i else ""
        print(f"r={row[0]} pixels={row[1]} batch={row[2]} per-sample {row[4] * 1e3:.3f} ms{ratio}")
    return EXIT_OK


# --------------------------------------------------------------------------
# mnist


def cmd_prepare(args) -> int:
    from .data import build_dataset

    grid = build_grid(args.res)
    atlas = build_atlas(grid)
    group = build_symmetry_group(grid, atlas) if args.mode == "I" else None
    t0 = time.perf_counter()
    man = build_dataset(args.images, args.labels, grid, atlas, args.mode, args.seed, args.out, group=group,
                        augment=args.augment, limit=args.limit)
    print(f"wrote {man['count']} items ({man['digits']} digits, mode {args.mode}, r={args.res}) "
          f"to {args.out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .nn import build_model, save_model
    from .train import fit

    x, y, man = load_dataset(args.train)
    if args.limit:
        x, y = x[: args.limit], y[: args.limit]
    test = None
    if args.test:
        xt, yt, _ = load_dataset(args.test)
        test = (xt, yt)
    model = build_model(args.arch, man["resolution"], seed=args.seed)
    model.meta = {"train_mode": man["mode"], "train_dir": os.fspath(args.train), "train_items": int(len(x)),
                  "epochs": args.epochs, "batch": args.batch, "lr": args.lr, "momentum": args.momentum,
                  "seed": args.seed}
    print(f"training {args.arch} ({model.num_params()} parameters) on {len(x)} items at r={man['resolution']}",
          file=sys.stderr)
    rows = fit(model, x, y, args.epochs, args.batch, args.lr, args.momentum, args.seed, test, args.log)
    save_model(model, args.out)
    last = [r for r in rows if r[0] == args.epochs]
    for r in last:
        print(f"epoch {r[0]} {r[1]} loss {r[2]:.4f} accuracy {100 * r[3]:.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .nn import load_model
    from .train import evaluate

    if not os.path.isfile(os.path.join(args.checkpoint, "manifest.json")):
        raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
    model = load_model(args.checkpoint)
    train_mode = model.meta.get("train_mode", "?")
    preds = {}
    print(f"{'train/test':<11}{'items':>8}{'accuracy':>11}")
    for path in args.test:
        x, y, man = load_dataset(path)
        if man["resolution"] != model.resolution:
            raise FormatError(f"{path}: dataset at r={man['resolution']} but model expects r={model.resolution}")
        _, acc, pred = evaluate(model, x, y, args.batch)
        label = f"{train_mode}/{man['mode']}"
        preds[path] = (label, man, pred)
        print(f"{label:<11}{len(y):>8}{100 * acc:>10.2f}%")
    paths = list(preds)
    for i in range(len(paths)):
        for j in range(i + 1, len(paths)):
            (la, ma, pa), (lb, mb, pb) = preds[paths[i]], preds[paths[j]]
            if ma["source_images"] == mb["source_images"] and len(pa) == len(pb) and ma["augment"] == mb["augment"] == "sample":
                agree = float(np.mean(pa == pb))
                print(f"prediction agreement {la} vs {lb}: {100 * agree:.2f}%")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icogauge", description="Gauge-equivariant convolution on the icosahedron.")
    p.add_argument("--threads", type=str, default=None, help="BLAS threads (default: $ICOGAUGE_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", help="export grid, atlas and symmetry tables as JSON")
    g.add_argument("--res", type=_resolution, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--no-group", action="store_true", help="skip the 60-element symmetry tables")
    g.set_defaults(func=cmd_grid)

    c = sub.add_parser("check", help="run a verification suite")
    c.add_argument("--suite", choices=("equivariance", "oracle", "kernel", "gradcheck", "atlas", "all"), required=True)
    c.add_argument("--res", type=_resolution, nargs="+", default=None,
                   help="resolution(s); defaults: equivariance 3, oracle 1 2 3, gradcheck 1, atlas 1 2 3 4")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench", help="time one regular-to-regular gconv per resolution")
    b.add_argument("--res-min", type=int, default=4)
    b.add_argument("--res-max", type=int, default=7)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--fields", type=_positive, default=12, help="regular fields in and out")
    b.add_argument("--budget-mb", type=float, default=512, help="feature-map memory per call, sets the batch size")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("mnist", help="IcoMNIST data preparation, training and evaluation")
    msub = m.add_subparsers(dest="mnist_command", required=True)
    mp = msub.add_parser("prepare", help="project IDX digits onto the grid")
    mp.add_argument("--images", required=True)
    mp.add_argument("--labels", required=True)
    mp.add_argument("--mode", choices=("N", "I", "R"), default="N")
    mp.add_argument("--augment", choices=("sample", "all"), default="sample",
                    help="one transformation per digit, or 60 per digit")
    mp.add_argument("--res", type=_resolution, default=4)
    mp.add_argument("--seed", type=int, default=0)
    mp.add_argument("--limit", type=_positive, default=None)
    mp.add_argument("--out", required=True)
    mp.set_defaults(func=cmd_prepare)

    from .nn import ARCHS

    mt = msub.add_parser("train", help="train a classifier on a prepared dataset")
    mt.add_argument("--train", required=True)
    mt.add_argument("--test", default=None)
    mt.add_argument("--arch", choices=ARCHS, default="r2r")
    mt.add_argument("--epochs", type=_positive, default=20)
    mt.add_argument("--batch", type=_positive, default=64)
    mt.add_argument("--lr", type=float, default=0.05)
    mt.add_argument("--momentum", type=float, default=0.9)
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--limit", type=_positive, default=None)
    mt.add_argument("--out", required=True, help="checkpoint directory")
    mt.add_argument("--log", default=None, help="CSV log (epoch, split, loss, accuracy)")
    mt.set_defaults(func=cmd_train)

    me = msub.add_parser("eval", help="evaluate a checkpoint on prepared test sets")
    me.add_argument("--checkpoint", required=True)
    me.add_argument("--test", nargs="+", required=True)
    me.add_argument("--batch", type=_positive, default=64)
    me.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench":
        if args.reps < 1:
            parser.error("--reps must be at least 1")
        if not 0 <= args.res_min <= args.res_max <= 7:
            parser.error("bench needs 0 <= --res-min <= --res-max <= 7")
    try:
        threads = _threads(args.threads)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (OSError, FormatError) as exc:
        print(f"icogauge: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IcoError as exc:
        print(f"icogauge: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        # configuration rejected after parsing, e.g. a model too deep for the data resolution
        print(f"icogauge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
