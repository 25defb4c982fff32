"""Command-line entry point: synth, train, register, eval, bench, dump-attention."""
from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .architecture import PATCH, ArchConfig, Trace, xmorpher_forward
from .registration import (
    TrainConfig,
    TrainingDiverged,
    Volume,
    dsc,
    jacobian_nonpositive_fraction,
    label_union,
    register,
    synth_pair,
    train,
    warp_labels,
)
from .tensorcore import Tensor, no_grad
from .windowing import WindowConfig

log = logging.getLogger("xmorpher")

PAIR_FILES = {
    "moving": ("moving.xmv", "scalar"),
    "fixed": ("fixed.xmv", "scalar"),
    "moving_labels": ("moving_labels.xmv", "label"),
    "fixed_labels": ("fixed_labels.xmv", "label"),
    "phi_gt": ("phi_gt.xmv", "vector3"),
}

LOSS_HEADER = ("iteration", "total", "similarity", "smoothness")
BENCH_HEADER = ("window", "dsc", "jac_nonpos_pct", "forward_seconds")


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors as one machine-parsable line, like every other failure."""

    def error(self, message):
        self.exit(2, f"error: UsageError: {self.prog}: {message}\n")


def _read(path, kind: str) -> np.ndarray:
    arr, got = io.read_volume(path)
    if got != kind:
        raise io.FormatError(f"{path}: expected a {kind} volume, found {got}")
    return arr


def load_pair(directory) -> tuple[Volume, Volume]:
    d = Path(directory)
    if not d.is_dir():
        raise CommandError(f"pair directory {d} does not exist")

    def opt(key):
        name, kind = PAIR_FILES[key]
        return _read(d / name, kind) if (d / name).exists() else None

    moving = Volume(_read(d / PAIR_FILES["moving"][0], "scalar"), opt("moving_labels"))
    fixed = Volume(_read(d / PAIR_FILES["fixed"][0], "scalar"), opt("fixed_labels"))
    return moving, fixed


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {p}: {exc.strerror}") from exc
    return p


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> None:
    step = PATCH * 2**args.levels
    if args.size < step or args.size % step:
        raise CommandError(f"--size {args.size} is incompatible with a {args.levels}-level architecture "
                           f"(extent must be a multiple of {step})")
    pair = synth_pair(args.seed, args.size)
    out = _ensure_dir(args.out_dir)
    arrays = {
        "moving": pair.moving.data,
        "fixed": pair.fixed.data,
        "moving_labels": pair.moving.labels,
        "fixed_labels": pair.fixed.labels,
        "phi_gt": pair.phi_gt,
    }
    for key, (name, kind) in PAIR_FILES.items():
        io.write_volume(out / name, arrays[key], kind)
    print(f"wrote pair seed={args.seed} size={args.size} to {out} "
          f"jac_nonpos_pct={jacobian_nonpositive_fraction(pair.phi_gt):.6f}")


def cmd_train(args) -> None:
    arch, tcfg = io.load_config(args.config)
    if args.iters is not None:
        tcfg = replace(tcfg, iters=args.iters)
    pairs = [load_pair(d) for d in args.pairs]
    for moving, fixed in pairs:
        if moving.shape != arch.size or fixed.shape != arch.size:
            raise CommandError(f"pair extent {moving.shape} does not match configured size {arch.size}")
    params, rows = train(pairs, arch, tcfg)
    io.save_checkpoint(args.out, arch, params)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_HEADER)
            for it, total, sim, smooth in rows:
                w.writerow([it, repr(total), repr(sim), repr(smooth)])
    if rows:
        print(f"trained iters={len(rows)} initial_loss={rows[0][1]:.6g} final_loss={rows[-1][1]:.6g} -> {args.out}")
    else:
        print(f"trained iters=0 (initialisation saved) -> {args.out}")


def cmd_register(args) -> None:
    arch, params = io.load_checkpoint(args.checkpoint)
    moving = Volume(_read(args.moving, "scalar"))
    fixed = Volume(_read(args.fixed, "scalar"))
    if moving.shape != fixed.shape:
        raise CommandError(f"moving {moving.shape} and fixed {fixed.shape} extents differ")
    if moving.shape != arch.size:
        raise CommandError(f"volume extent {moving.shape} does not match checkpoint size {arch.size}")
    phi, warped = register(moving, fixed, params, arch)
    io.write_volume(args.out_dvf, phi, "vector3")
    io.write_volume(args.out_warped, warped, "scalar")
    if args.moving_labels or args.out_warped_labels:
        if not (args.moving_labels and args.out_warped_labels):
            raise CommandError("--moving-labels and --out-warped-labels must be given together")
        io.write_volume(args.out_warped_labels, warp_labels(_read(args.moving_labels, "label"), phi), "label")
    print(f"registered max_abs_displacement={np.abs(phi).max():.6g} "
          f"jac_nonpos_pct={jacobian_nonpositive_fraction(phi):.6f}")


def cmd_eval(args) -> None:
    warped = _read(args.warped_labels, "label")
    fixed = _read(args.fixed_labels, "label")
    labels = [int(v) for v in args.labels.split(",")] if args.labels else label_union(warped, fixed)
    score = dsc(warped, fixed, labels)
    phi = _read(args.dvf, "vector3")
    print(f"dsc={score:.6f} jac_nonpos_pct={jacobian_nonpositive_fraction(phi):.6f}")


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise CommandError(f"--sizes must be comma-separated integers, got {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise CommandError("--sizes must be positive")
    return sizes


def time_forward(moving: Volume, fixed: Volume, params, arch: ArchConfig, repeats: int = 3) -> float:
    mv, fx = Tensor(moving.data, dtype=np.float32), Tensor(fixed.data, dtype=np.float32)
    times = []
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            xmorpher_forward(mv, fx, params, arch)
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(sizes, moving: Volume, fixed: Volume, base: ArchConfig, tcfg: TrainConfig, repeats: int = 3):
    rows = []
    labels = label_union(moving.labels, fixed.labels)
    for s in sizes:
        arch = replace(base, window=WindowConfig((s, s, s), base.window.magnification), size=moving.shape)
        params, _ = train([(moving, fixed)], arch, tcfg)
        phi, _ = register(moving, fixed, params, arch)
        score = dsc(warp_labels(moving.labels, phi), fixed.labels, labels)
        rows.append((s, score, jacobian_nonpositive_fraction(phi), time_forward(moving, fixed, params, arch, repeats)))
    return rows


def _direction(values) -> str:
    if all(b >= a for a, b in zip(values, values[1:])):
        return "non-decreasing"
    if all(b <= a for a, b in zip(values, values[1:])):
        return "non-increasing"
    return "mixed"


def cmd_bench(args) -> None:
    sizes = _parse_sizes(args.sizes)
    if args.config:
        base, tcfg = io.load_config(args.config)
    else:
        base, tcfg = ArchConfig(size=(args.size,) * 3), TrainConfig()
    tcfg = replace(tcfg, iters=args.iters)
    if args.pair:
        moving, fixed = load_pair(args.pair)
        if moving.labels is None or fixed.labels is None:
            raise CommandError(f"{args.pair} has no label maps; bench needs them for DSC")
    else:
        pair = synth_pair(args.seed, args.size)
        moving, fixed = pair.moving, pair.fixed
    rows = run_bench(sizes, moving, fixed, base, tcfg, args.repeats)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for s, score, jac, secs in rows:
            w.writerow([s, f"{score:.6f}", f"{jac:.6f}", f"{secs:.6f}"])
    print(f"trend (qualitative, not gated) over window sizes {sizes}: "
          f"dsc {_direction([r[1] for r in rows])}, jac_nonpos_pct {_direction([r[2] for r in rows])}, "
          f"forward_seconds {_direction([r[3] for r in rows])}")


def attention_map(dump, level_shape) -> np.ndarray:
    """Attention received per grid voxel: per-window mean over heads and queries, summed over windows."""
    mean_w = dump.weights.mean(axis=(1, 2))  # (n, mu*s)
    offs = np.stack(np.meshgrid(*[np.arange(n) for n in dump.search_shape], indexing="ij"), -1).reshape(-1, 3)
    pos = dump.search_origins[:, None, :] + offs[None]
    out = np.zeros(level_shape)
    keep = dump.valid
    np.add.at(out, (pos[..., 0][keep], pos[..., 1][keep], pos[..., 2][keep]), mean_w[keep])
    return out


def cmd_dump_attention(args) -> None:
    arch, params = io.load_checkpoint(args.checkpoint)
    moving, fixed = load_pair(args.pair)
    if not 0 <= args.level <= arch.levels:
        raise CommandError(f"--level must be in 0..{arch.levels}")
    if args.level == arch.levels:
        stage = "bottleneck"
    else:
        stage = f"{args.stage}{args.level}"
    direction = "self" if arch.no_cross else args.direction
    if not 0 <= args.round < arch.blocks:
        raise CommandError(f"--round must be in 0..{arch.blocks - 1}")
    trace = Trace()
    with no_grad():
        xmorpher_forward(Tensor(moving.data, dtype=np.float32), Tensor(fixed.data, dtype=np.float32), params, arch, trace)
    dump = trace.attention[(stage, args.round, direction)]
    out = _ensure_dir(args.out)
    for i in range(dump.weights.shape[0]):
        io.write_attention_window(out / f"window_{i:05d}.xma", dump, i)
    amap = attention_map(dump, arch.extent(args.level))
    for axis in range(3):
        mip = amap.max(axis=axis)
        io.write_pgm(out / f"attention_mip_axis{axis}.pgm", np.kron(mip, np.ones((args.scale, args.scale))))
    print(f"dumped {dump.weights.shape[0]} windows stage={stage} round={args.round} direction={direction} to {out}")


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xmorpher", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic pair and its ground-truth field")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--levels", type=int, default=2, help="architecture depth the extent must fit")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on pair directories and save a checkpoint")
    p.add_argument("--pairs", nargs="+", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None, help="override the config's iteration count")
    p.add_argument("--log", default=None, help="write the loss trace as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="predict a displacement field and warp the moving image")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dvf", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--moving-labels")
    p.add_argument("--out-warped-labels")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="mean DSC and non-positive Jacobian percentage")
    p.add_argument("--warped-labels", required=True)
    p.add_argument("--fixed-labels", required=True)
    p.add_argument("--dvf", required=True)
    p.add_argument("--labels", default=None, help="comma-separated label set (default: union of nonzero labels)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="window-size sweep: DSC, folding and forward time")
    p.add_argument("--sizes", default="1,2,4")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--pair", default=None, help="pair directory (default: synthetic pair from --seed)")
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-attention", help="write per-window attention weights and projection images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--stage", choices=("enc", "dec"), default="enc")
    p.add_argument("--direction", choices=("mf", "fm"), default="mf",
                   help="mf: moving-stream queries attend to the fixed stream")
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--scale", type=int, default=8, help="nearest-neighbour upscaling of the images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CommandError, io.FormatError, io.ConfigError, TrainingDiverged, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
