"""Command-line entry point.

Subcommands: synth, train, eval, gradcheck, dump-templates, ablate.
Shared flags: --config FILE, --preset NAME, --seed N, --out DIR, plus any
number of dotted-key overrides like ``train.iterations=200``.

Exit codes: 0 success, 1 numeric or assertion failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

# must be set before the first numpy import: OpenBLAS worker threads
# otherwise busy-spin for ~20 ms after every call, starving the
# single-threaded array work in between on small machines
os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "5")

import numpy as np

from . import tensor as T
from .config import PRESETS, RunConfig, load_config
from .data import (
    ConfigurationError,
    IngestionError,
    load_aligned_sequence,
    load_casia_layout,
    load_ou_mvlp_layout,
    synth_generate,
)
from .evaluate import ablation_grid, evaluate_split, write_report_files
from .gradcheck import format_table, run_gradcheck
from .network import (
    CheckpointError,
    forward_with_templates,
    init_params,
    load_checkpoint,
)
from .templates import dump_template_pgms
from .trainer import train


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named parameter regime")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="dotted-key config overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scngait", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic silhouette dataset")
    _common_flags(p)

    p = sub.add_parser("train", help="triplet-train the feature extractor")
    p.add_argument("--resume", help="checkpoint to continue from")
    _common_flags(p)

    p = sub.add_parser("eval", help="cross-view rank-1 evaluation")
    p.add_argument("--checkpoint", help="trained checkpoint (.scn)")
    _common_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", help="run only checks whose name contains this")
    _common_flags(p)

    p = sub.add_parser("dump-templates", help="write per-stage motion templates as PGM")
    p.add_argument("--checkpoint", help="trained checkpoint (.scn); random init if omitted")
    p.add_argument("--sequence", required=False, help="sequence directory to analyze")
    _common_flags(p)

    p = sub.add_parser("ablate", help="re-train and score the fusion/aggregator grids")
    _common_flags(p)
    return parser


def _load_index(cfg: RunConfig):
    root = cfg["data.root"]
    if not os.path.isdir(root):
        raise ConfigurationError(f"data.root {root!r} does not exist (run `scngait synth` first?)")
    if cfg["data.protocol"] == "ou_mvlp":
        return load_ou_mvlp_layout(root, cfg["data.train_subjects"] or 5153)
    return load_casia_layout(root, cfg.protocol())


def cmd_synth(cfg: RunConfig, out: str) -> int:
    target = out or cfg["data.root"]
    index = synth_generate(cfg.synth_spec(), target)
    cfg.echo(target)
    print(f"wrote {len(index.records)} sequences under {target}")
    return 0


def cmd_train(cfg: RunConfig, out: str, resume=None) -> int:
    out = out or "runs/train"
    cfg.echo(out)
    index = _load_index(cfg)
    params = init_params(cfg.scn_config(), np.random.default_rng(cfg["seed"]))
    ckpt = train(
        params, index, cfg.batch_spec(), cfg.triplet_config(),
        iterations=cfg["train.iterations"], out_dir=out, seed=cfg["seed"],
        schedule=cfg["train.schedule"], custom_schedule=cfg.custom_schedule(),
        checkpoint_every=cfg["train.checkpoint_every"],
        log_every=cfg["train.log_every"], resume_from=resume,
    )
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_eval(cfg: RunConfig, out: str, checkpoint=None) -> int:
    if not checkpoint or not os.path.exists(checkpoint):
        raise ConfigurationError(f"--checkpoint {checkpoint!r} not found")
    out = out or "runs/eval"
    cfg.echo(out)
    index = _load_index(cfg)
    params = init_params(cfg.scn_config(), np.random.default_rng(cfg["seed"]))
    load_checkpoint(checkpoint, params)
    report = evaluate_split(
        params, index,
        exclude_identical_view=cfg["eval.exclude_identical_view"],
        gallery_equals_probe=cfg["eval.gallery_equals_probe"],
    )
    files = write_report_files(report, out)
    for subset in report.subsets:
        print(f"{subset}: overall rank-1 {report.overall_mean(subset):.2f}%")
    print("wrote: " + ", ".join(files))
    return 1 if report.absent_cells else 0


def cmd_gradcheck(cfg: RunConfig, out: str, only=None) -> int:
    results = run_gradcheck(only=only, seed=cfg["seed"])
    print(format_table(results))
    if out:
        cfg.echo(out)
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            fh.write(format_table(results) + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_dump_templates(cfg: RunConfig, out: str, checkpoint=None, sequence=None) -> int:
    if not sequence or not os.path.isdir(sequence):
        raise ConfigurationError(f"--sequence {sequence!r} is not a directory")
    out = out or "runs/templates"
    cfg.echo(out)
    scn_cfg = cfg.scn_config()
    params = init_params(scn_cfg, np.random.default_rng(cfg["seed"]))
    if checkpoint:
        if not os.path.exists(checkpoint):
            raise ConfigurationError(f"--checkpoint {checkpoint!r} not found")
        load_checkpoint(checkpoint, params)
    frames = T.Tensor(load_aligned_sequence(sequence).astype(scn_cfg.np_dtype))
    _, templates = forward_with_templates(params, frames)
    total = 0
    for stage, tmpl in enumerate(templates, start=1):
        if tmpl is None:
            continue
        paths = dump_template_pgms(tmpl, stage, out)
        total += len(paths)
        print(f"stage {stage}: {len(paths)} maps ({tmpl.kind})")
    print(f"wrote {total} template images under {out}")
    return 0


def cmd_ablate(cfg: RunConfig, out: str) -> int:
    out = out or "runs/ablation"
    cfg.echo(out)
    index = _load_index(cfg)
    grid = ablation_grid(
        cfg.scn_config(), index, out, cfg.batch_spec(), cfg.triplet_config(),
        iterations=cfg["train.iterations"], seed=cfg["seed"],
        schedule=cfg["train.schedule"], custom_schedule=cfg.custom_schedule(),
    )
    failures = [r["label"] for r in grid["bie"] + grid["mfa"] if r["error"]]
    print(f"wrote ablation tables under {out}")
    if failures:
        print("cells with errors: " + ", ".join(failures))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(preset=args.preset, config_file=args.config,
                          overrides=args.overrides, seed=args.seed)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, checkpoint=args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.out, only=args.op)
        if args.command == "dump-templates":
            return cmd_dump_templates(cfg, args.out, checkpoint=args.checkpoint,
                                      sequence=args.sequence)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.out)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, IngestionError, CheckpointError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (T.NumericError, AssertionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
