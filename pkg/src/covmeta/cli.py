"""Command-line entry point: ``covmeta {gen,train,eval,compare,gradcheck}``.

Exit status 0 on success, 1 on validation or I/O errors, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import autodiff as ad
from . import checkpoint as ckpt
from . import experiment as ex
from . import taskgen
from .config import ConfigError, RunConfig, preset_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser, only=None):
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    for f in fields(RunConfig):
        if only is not None and f.name not in only:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        elif f.type == "tuple":
            p.add_argument(flag, type=int, nargs="+", default=argparse.SUPPRESS, metavar="WIDTH")
        else:
            kind = {"int": int, "float": float, "str": str}[f.type]
            p.add_argument(flag, type=kind, default=argparse.SUPPRESS)


def _overrides(args) -> dict:
    names = {f.name for f in fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in names}


def _config(args) -> RunConfig:
    over = _overrides(args)
    if args.config:
        return RunConfig.load(args.config).replace(**over)
    return preset_config(over.pop("algorithm", "ours"), **over)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="covmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a task dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="dataset path (default: <output-dir>/dataset.bin)")

    p = sub.add_parser("train", help="meta-train and write checkpoints and a log")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset file (default: generate from the config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    _add_config_flags(p, only={"eval_tasks", "eval_support", "eval_query", "eval_seed", "inner_steps",
                               "inner_lr", "first_order", "hidden", "bias_transform", "latent",
                               "decoder_hidden", "encoder_input", "input_scale", "output_dir"})
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="records CSV (default: <output-dir>/eval.csv)")
    p.add_argument("--label", default="", help="row label used by compare")

    p = sub.add_parser("compare", help="tabulate several evaluation files")
    p.add_argument("files", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV here")

    p = sub.add_parser("gradcheck", help="meta-gradient vs finite differences on a miniature model")
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--first-order", action="store_true",
                   help="also check first-order mode (expected to diverge for K >= 1)")
    p.add_argument("--algorithm", action="append", choices=("ours", "maml", "mmaml-lite"))
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "dataset.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    tasks, manifest = ex.generate(cfg)
    taskgen.write_dataset(out, tasks, manifest)
    print(ex.dataset_summary(manifest, tasks))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = manifest = None
    if args.data:
        tasks, manifest = taskgen.read_dataset(args.data)
    resume = ckpt.load(args.resume) if args.resume else None
    cfg.save(out / "config.json")

    def progress(rec):
        if not args.quiet and (rec["step"] % 100 == 0 or rec["step"] == 1):
            print(f"step {rec['step']:6d}  total {rec['total']:.4f}  task_nll {rec['task_nll']:.4f}",
                  flush=True)

    state = ex.train(cfg, tasks, manifest, resume, out / "train.jsonl", out, progress=progress)
    print(f"finished at step {state.step}; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    cfg = ex.eval_config(ck.config, _overrides(args))
    if args.config:
        other = RunConfig.load(args.config)
        if other.architecture() != ck.config.architecture() or other.algorithm != ck.config.algorithm:
            raise ConfigError("architecture in the evaluation config does not match the checkpoint")
    records, summary = ex.evaluate(cfg, ck.params, args.label)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval.csv"
    ex.write_records(out, records, summary)
    print(f"{summary.label}: {summary.n} tasks, pre {summary.mean_pre:.4f}, "
          f"post {summary.mean_post:.4f} +- {summary.ci_post:.4f} (eval seed {summary.eval_seed})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    table = ex.compare(args.files)
    print(table.to_text())
    print()
    print(table.to_csv(), end="")
    if args.csv:
        Path(args.csv).write_text(table.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    algs = tuple(args.algorithm or ("ours", "maml"))
    results = ex.gradcheck_battery(args.inner_steps, args.first_order, args.seed, algs)
    print(ex.format_gradcheck(results))
    ok = all(r.passed for r in results)
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ad.NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ckpt.CheckpointError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
