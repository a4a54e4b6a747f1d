"""Command-line entry points.

Subcommands: gen-demos, pretrain, train, eval, bench-matrix, report. Each
takes ``--config <file>`` plus trailing dotted-path overrides (key=value).
Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench
from .config import apply_overrides, load_config_file, parse_config
from .data import load_dataset, save_dataset
from .errors import ArchiveError, ConfigurationError, DomainError, ProtocolError
from .report import render_table


def _load_cfg(args) -> dict:
    if args.config:
        cfg = load_config_file(args.config)
    else:
        cfg = parse_config({})
    return apply_overrides(cfg, args.overrides or [])


def _add_common(sub):
    sub.add_argument("--config", help="YAML config file (defaults used when omitted)")
    sub.add_argument("overrides", nargs="*", metavar="key.path=value",
                     help="dotted-path config overrides")


def cmd_gen_demos(args) -> int:
    cfg = _load_cfg(args)
    task = cfg["task_name"]
    out = Path(args.out or cfg["run"]["dataset_dir"] or f"data/{task}")
    demos = cfg["demos"]
    runner = cfg["task"]["env_runner"]
    episodes = bench.generate_demos(
        task, demos["n_episodes"], demos["start_seed"],
        successful_only=demos["successful_only"],
        max_steps=runner["max_steps"] or None)
    save_dataset(out, episodes, task=task)
    n_steps = sum(len(e) for e in episodes)
    print(f"wrote {len(episodes)} episodes ({n_steps} steps) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    task = cfg["task_name"]
    family = args.family or cfg["policy"]["obs_encoder"]["rgb_model"]["name"]
    workdir = Path(args.workdir)
    path = bench.ensure_pretrained_archive(cfg, task, family, workdir)
    print(f"pretrained weights at {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    task = cfg["task_name"]
    data_dir = Path(args.dataset or cfg["run"]["dataset_dir"] or f"data/{task}")
    episodes, _ = load_dataset(data_dir)
    ckpt = Path(args.out or cfg["run"]["out_dir"] or "runs") / f"{task}.ckpt"
    bench.train_cell(cfg, episodes, ckpt)
    print(f"checkpoint at {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    ckpt = args.checkpoint or cfg["run"]["checkpoint"]
    if not ckpt:
        raise ConfigurationError("eval needs --checkpoint or run.checkpoint")
    data_dir = args.dataset or cfg["run"]["dataset_dir"]
    episodes_meta = []
    if args.split == "train":
        if not data_dir:
            raise ConfigurationError("train split needs --dataset for its seeds")
        _, index = load_dataset(data_dir)
        episodes_meta = index["episodes"]
    result = bench.eval_cell(cfg, ckpt, args.split, episodes_meta,
                             cfg["matrix"]["n_eval_episodes"],
                             canonical=cfg["matrix"]["canonical"])
    results_file = args.results or cfg["run"]["results_file"]
    if results_file:
        bench.append_result(results_file, result, canonical=cfg["matrix"]["canonical"])
    print(f"{result.task}/{result.family}/{result.regime}/{result.split}: "
          f"success_rate {result.success_rate:.2f} ({result.n_success}/{result.n_episodes})")
    return 0


def cmd_bench_matrix(args) -> int:
    cfg = _load_cfg(args)
    results = bench.run_matrix(cfg, Path(args.workdir))
    print(f"results at {results}")
    return 0


def cmd_report(args) -> int:
    records = bench.read_results(args.results)
    sys.stdout.write(render_table(records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffbench",
        description="Train and benchmark action-diffusion visuomotor policies")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-demos", help="record scripted-expert demonstrations")
    _add_common(p)
    p.add_argument("--out", help="dataset output directory")
    p.set_defaults(fn=cmd_gen_demos)

    p = subs.add_parser("pretrain", help="produce an emulated pretrained-weight archive")
    _add_common(p)
    p.add_argument("--family", choices=["resnet_style_cnn", "vit_patch16"])
    p.add_argument("--workdir", default="runs", help="directory for the archive")
    p.set_defaults(fn=cmd_pretrain)

    p = subs.add_parser("train", help="train one policy on a demo dataset")
    _add_common(p)
    p.add_argument("--dataset", help="demo dataset directory")
    p.add_argument("--out", help="checkpoint output directory")
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint under the closed-loop protocol")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--dataset", help="demo dataset (for train-split seeds)")
    p.add_argument("--results", help="JSON-lines results file to append to")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("bench-matrix", help="run the task x family x regime sweep")
    _add_common(p)
    p.add_argument("--workdir", default="runs", help="working directory for the sweep")
    p.set_defaults(fn=cmd_bench_matrix)

    p = subs.add_parser("report", help="render a results file as a comparison table")
    p.add_argument("--results", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ArchiveError, DomainError, ProtocolError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
