"""``cdcd`` command: train, sample, eval and warp-inspect."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from . import config as config_mod
from . import runner

_RESUMABLE = ("steps", "checkpoint_every")


def _config_with_base(path):
    """Load a config, resolving a relative corpus path against the config's folder."""
    cfg = config_mod.load(path)
    data = cfg["data"]
    if data["source"] == "corpus":
        p = Path(data["path"])
        if not p.is_absolute():
            data["path"] = str((Path(path).parent / p).resolve())
    return cfg


def _run_from_args(args, need_checkpoint: bool) -> runner.Run:
    if args.checkpoint:
        return runner.load_run(args.checkpoint)
    if need_checkpoint or not args.config:
        raise ValueError("--checkpoint is required" if need_checkpoint else "need --config or --checkpoint")
    cfg = _config_with_base(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return runner.new_run(cfg)


def cmd_train(args) -> None:
    if args.checkpoint:
        run = runner.load_run(args.checkpoint)
        if args.config:
            new = _config_with_base(args.config)
            if args.seed is not None:
                new["seed"] = args.seed
            fixed = lambda c: {**c, "train": {k: v for k, v in c["train"].items() if k not in _RESUMABLE}}
            if fixed(new) != fixed(run.cfg):
                raise ValueError("resume config differs from the checkpoint beyond train.steps/checkpoint_every")
            run.cfg["train"].update({k: new["train"][k] for k in _RESUMABLE})
        elif args.seed is not None and args.seed != run.cfg["seed"]:
            raise ValueError("--seed differs from the checkpoint's seed")
    else:
        run = _run_from_args(args, need_checkpoint=False)
    last = runner.train(run, args.out, log=lambda s: print(s, file=sys.stderr))
    print(last)


def _sampler_overrides(args) -> dict:
    return {
        "n_steps": args.steps, "solver": args.solver, "score_temp": args.score_temp,
        "guidance": args.guidance, "nucleus_p": args.nucleus_p, "sigma_init": args.sigma_init,
        "decode": args.decode,
    }


def _samples(args, run):
    n = args.n_samples if args.n_samples is not None else run.cfg["eval"]["n_samples"]
    seed = args.seed if args.seed is not None else run.cfg["seed"]
    return runner.generate(run, n, seed, **_sampler_overrides(args))


def cmd_sample(args) -> None:
    run = _run_from_args(args, need_checkpoint=True)
    tokens, grid = _samples(args, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "samples.txt").write_text(runner.format_samples(run, tokens), encoding="utf-8")
    if args.trajectory:
        with (out / "trajectory.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t"])
            w.writerows([k, repr(float(t))] for k, t in enumerate(grid))
    print(out / "samples.txt")


def cmd_eval(args) -> None:
    run = _run_from_args(args, need_checkpoint=True)
    tokens, _ = _samples(args, run)
    report = runner.evaluate(run, tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_json())


def cmd_warp_inspect(args) -> None:
    run = _run_from_args(args, need_checkpoint=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "warp.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(runner.WARP_COLUMNS)
        w.writerows([repr(float(v)) for v in row] for row in runner.warp_table(run))
    print(out / "warp.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdcd", description="Continuous diffusion for categorical data at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", metavar="PATH", help="JSON run config")
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR", default=out_default)

    def sampling(p):
        p.add_argument("--n-samples", type=int, metavar="N")
        p.add_argument("--steps", type=int, help="number of solver steps")
        p.add_argument("--solver", choices=["euler", "heun"])
        p.add_argument("--score-temp", type=float)
        p.add_argument("--guidance", type=float)
        p.add_argument("--nucleus-p", type=float)
        p.add_argument("--sigma-init", type=float)
        p.add_argument("--decode", choices=["argmax", "nearest_embedding"])

    p = sub.add_parser("train", help="train (or resume with --checkpoint)")
    common(p, "run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write generated sequences as text lines")
    common(p, "samples")
    sampling(p)
    p.add_argument("--trajectory", action="store_true", help="also dump the timestep grid as CSV")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="sample and score against the data source")
    common(p, "eval")
    sampling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-inspect", help="dump the learnt time warp on a 1000-point grid")
    common(p, "warp")
    p.set_defaults(func=cmd_warp_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        args.func(args)
    except Exception as exc:  # every failure maps to a nonzero exit
        print(f"cdcd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
