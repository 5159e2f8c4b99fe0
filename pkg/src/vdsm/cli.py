"""``vdsm`` command line: gen-data, train, sample, swap, eval.

Config files hold ``key = value`` lines (``#`` starts a comment). Keys are
any TrainConfig or schedule field plus ``data``, ``out``,
``init_checkpoint`` and ``threads``. ``--override key=value`` and the
dedicated flags win over file values.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, load_run_config
from .datasets import load_dataset, make_dataset, save_dataset
from .evaluation import evaluate, write_eval_csv
from .persistence import load_checkpoint, save_checkpoint
from .schedules import PRETRAIN, SEQUENCE
from .trainer import FACTORS, INIT, METRIC_COLUMNS, StageOrderError, generate, init_state, pretrain, swap, train_sequences

CHECKPOINT = "checkpoint.vdsm"
PRETRAINED = "pretrain.vdsm"
METRICS = "metrics.csv"

log = logging.getLogger("vdsm")


class CLIError(Exception):
    pass


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("VDSM_THREADS")
    if env:
        try:
            return _positive(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise CLIError(f"VDSM_THREADS must be a positive integer, got {env!r}") from None
    return 1


# -- image grids ------------------------------------------------------------------


def to_uint8(frames) -> np.ndarray:
    x = frames.numpy() if isinstance(frames, torch.Tensor) else np.asarray(frames)
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def grid_image(rows: np.ndarray, pad: int = 1) -> Image.Image:
    """(R, T, C, H, W) in [0, 1] -> one image, rows top to bottom, time left to right."""
    rows = to_uint8(rows)
    r, t, c, h, w = rows.shape
    canvas = np.full((r * (h + pad) + pad, t * (w + pad) + pad, c), 255, np.uint8)
    for i in range(r):
        for j in range(t):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = rows[i, j].transpose(1, 2, 0)
    return Image.fromarray(canvas[..., 0] if c == 1 else canvas)


def _save_png(img: Image.Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    ds = make_dataset(args.set, args.count, args.seed, T=args.T, size=args.size)
    out = Path(args.out or f"data/{args.set}.vdsd")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} sequences to {out}")


def _run_config(args) -> RunConfig:
    overrides: Dict[str, str] = {}
    for item in args.override or []:
        if "=" not in item:
            raise CLIError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("data", "out", "seed", "pretrain_epochs", "sequence_epochs", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_run_config(args.config, overrides)


def write_metrics(history: List[Dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, METRIC_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def cmd_train(args) -> None:
    run = _run_config(args)
    explicit = args.threads is not None or "VDSM_THREADS" not in os.environ
    torch.set_num_threads(run.threads if explicit else _threads(None))
    if run.data is None:
        raise CLIError("no dataset given (use --data or 'data = ...' in the config)")
    if not Path(run.data).exists():
        raise CLIError(f"dataset not found: {run.data}")
    ds = load_dataset(run.data)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT

    if args.resume:
        if not ckpt.exists():
            raise CLIError(f"--resume: no checkpoint at {ckpt}")
        state = load_checkpoint(ckpt)
        if state.config != run.train:
            log.warning("resuming with the checkpoint's config; file/flag settings are ignored")
    elif args.stage == "sequence" and not args.joint:
        src = Path(run.init_checkpoint or out / PRETRAINED)
        if not src.exists():
            raise StageOrderError(f"sequence stage needs a pretrained checkpoint; none at {src}")
        state = load_checkpoint(src)
    else:
        state = init_state(run.train)
    config = state.config

    def on_epoch(st, row):
        save_checkpoint(st, ckpt)
        write_metrics(st.history, out / METRICS)
        if st.pretrain_complete:
            save_checkpoint(st, out / PRETRAINED)
        print(f"{row['stage']} epoch {st.epoch}: elbo {row['weighted_total']:.2f}", flush=True)

    budget = args.stop_after  # epochs left for this invocation (None: unlimited)

    def run_stage(fn, st, **kw):
        nonlocal budget
        before = len(st.history)
        st = fn(ds, config=config, state=st, on_epoch=on_epoch, max_epochs=budget, **kw)
        if budget is not None:
            budget -= len(st.history) - before
        return st

    if args.joint:
        if state.stage not in (INIT, SEQUENCE):
            raise StageOrderError("joint training starts from an untrained model")
        state = run_stage(train_sequences, state, joint=True)
    else:
        if args.stage in ("pretrain", "both") and state.stage in (INIT, PRETRAIN):
            state = run_stage(pretrain, state)
        if args.stage in ("sequence", "both") and budget != 0:
            if state.stage != SEQUENCE and not state.pretrain_complete:
                raise StageOrderError("sequence stage needs a completed pretraining stage")
            state = run_stage(train_sequences, state)
    save_checkpoint(state, ckpt)
    write_metrics(state.history, out / METRICS)
    print(f"stage {state.stage}, epoch {state.epoch}; checkpoint {ckpt}")


def _load_state(path: str):
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_sample(args) -> None:
    torch.set_num_threads(_threads(args.threads))
    state = _load_state(args.checkpoint)
    seqs = generate(state, args.T, seed=args.seed, n=args.n)
    out = Path(args.out)
    _save_png(grid_image(seqs), out)
    if args.frames_dir:
        fdir = Path(args.frames_dir)
        for i in range(seqs.shape[0]):
            for t in range(seqs.shape[1]):
                _save_png(grid_image(seqs[i : i + 1, t : t + 1], pad=0), fdir / f"sample{i:03d}_t{t:03d}.png")
    print(f"wrote {out}")


def _dataset(path: str):
    if not Path(path).exists():
        raise CLIError(f"dataset not found: {path}")
    return load_dataset(path)


def cmd_swap(args) -> None:
    torch.set_num_threads(_threads(args.threads))
    state = _load_state(args.checkpoint)
    ds = _dataset(args.data)
    for name in ("a", "b"):
        idx = getattr(args, name)
        if not 0 <= idx < len(ds):
            raise CLIError(f"--{name} {idx} out of range (dataset has {len(ds)} sequences)")
    a, b = ds.frames[args.a], ds.frames[args.b]
    T = args.T or a.shape[0]
    mixed = swap(state, a, b, args.factor, T, args.seed)[0].numpy()
    rows = [a[:T], b[:T], mixed]
    t_min = min(len(r) for r in rows)
    grid = np.stack([r[:t_min] for r in rows])
    _save_png(grid_image(grid), Path(args.out))
    print(f"wrote {args.out}")


def cmd_eval(args) -> None:
    torch.set_num_threads(_threads(args.threads))
    state = _load_state(args.checkpoint)
    ds = _dataset(args.data)
    report = evaluate(state, ds, split_seed=args.split_seed, seed=args.seed, n_generate=args.n_generate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report, out)
    for row in report.rows():
        print(f"{row['metric']:<12}{row['embedding']:<7}{row['factor']:<10}{row['value']:.4f}")
    for factor, acc in report.swap_accuracy.items():
        print(f"swap {factor}: {acc:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdsm", description="Sequential disentanglement with a mixture-of-experts decoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--set", required=True, choices=["pendulum", "shapes"])
    g.add_argument("--count", type=_positive, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=_positive, default=16)
    g.add_argument("--size", type=_positive, default=32)
    g.add_argument("--out", help="dataset path (default data/<set>.vdsd)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--stage", choices=["pretrain", "sequence", "both"], default="both")
    t.add_argument("--joint", action="store_true", help="ablation: single stage, nothing frozen")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.vdsm")
    t.add_argument("--stop-after", type=_nonneg, help="stop after this many epochs")
    t.add_argument("--seed", type=int)
    t.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=_nonneg)
    t.add_argument("--sequence-epochs", dest="sequence_epochs", type=_nonneg)
    t.add_argument("--override", action="append", metavar="KEY=VALUE")
    t.add_argument("--threads", type=_positive)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="unconditional generation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=_positive, default=4)
    s.add_argument("--T", type=_positive, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.png")
    s.add_argument("--frames-dir", help="also write one PNG per frame here")
    s.add_argument("--threads", type=_positive)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("swap", help="transfer identity or dynamics between two sequences")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--factor", required=True, choices=list(FACTORS))
    w.add_argument("--a", type=int, required=True)
    w.add_argument("--b", type=int, required=True)
    w.add_argument("--T", type=_positive)
    w.add_argument("--seed", type=int, help="transition noise seed (default: noiseless means)")
    w.add_argument("--out", default="swap.png")
    w.add_argument("--threads", type=_positive)
    w.set_defaults(func=cmd_swap)

    e = sub.add_parser("eval", help="probe matrix, consistency and entropies")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="eval.csv")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-generate", type=_positive, default=100)
    e.add_argument("--threads", type=_positive)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("vdsm: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic for every failure
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"vdsm {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
