# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""``dartfx-slad`` command line.

Verbs::

    dartfx-slad run CONFIG [--seed N --epochs N --strategy S --mapping M --rank R --temperature T]
    dartfx-slad report RUN_DIR [RUN_DIR ...] [--format csv|markdown] [--out FILE]
    dartfx-slad cka RUN_DIR [--probe-size N] [--token cls|mean]
    dartfx-slad synth OUT_DIR [--classes C --per-class N --image-size S --seed N]
    dartfx-slad pretrain OUT_DIR [--config FILE] [--seed N --teacher-epochs N --student-epochs N]
    dartfx-slad seeds CONFIG [--seeds 0 1 2] [--jobs N]
    dartfx-slad sweep CONFIG --param mapping|rank|temperature|weights [--values ...]

Exit status is 0 on success, 1 for invalid configuration or usage, 2 when training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys

from dotenv import load_dotenv

from .__about__ import __version__
from .data import save_image_folder, synth_dataset
from .errors import NumericalError, SladError
from .experiment import (
    SWEEP_DEFAULTS,
    analyze_run,
    load_config,
    load_pretrain_config,
    render_ablation,
    report,
    resolve_output_root,
    run,
    run_seeds,
    run_sweep,
)
from .pretrain import write_pretrained

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s (%(filename)s:%(lineno)s)"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "epochs": args.epochs,
        "strategy": args.strategy,
        "mapping": args.mapping,
        "rank": args.rank,
        "distill.temperature": args.temperature,
    }


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        logging.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    config = load_config(args.config, _overrides(args))
    result = run(config, resolve_output_root(args.output, config))
    print(json.dumps({"run_id": result.run_id, "run_dir": result.run_dir, "status": result.status}))
    return result.status


def cmd_report(args) -> int:
    _emit(report(args.runs, args.format), args.out)
    return 0


def cmd_cka(args) -> int:
    summary = analyze_run(args.run_dir, args.probe_size, args.token)
    print(summary.model_dump_json(indent=2))
    return 0


def cmd_synth(args) -> int:
    data = synth_dataset(args.classes, args.per_class, args.image_size, args.seed, args.test_per_class)
    root = save_image_folder(data, args.out_dir)
    (root / "dataset.json").write_text(data.descriptor.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logging.info(f"Exported synthetic dataset to {root}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_pretrain_config(args.config, {"seed": args.seed, "teacher_epochs": args.teacher_epochs,
                                                "student_epochs": args.student_epochs})
    summary = write_pretrained(config, args.out_dir)
    print(json.dumps({key: summary[key] for key in ("teacher", "student", "test_accuracy", "mean_aligned_cka")}))
    return 0


def cmd_seeds(args) -> int:
    config = load_config(args.config, {**_overrides(args), "seed": args.seeds[0]})
    results = run_seeds(config, args.seeds, resolve_output_root(args.output, config), args.jobs)
    _emit(report([r.run_dir for r in results], args.format), args.out)
    return max(r.status for r in results)


def cmd_sweep(args) -> int:
    config = load_config(args.config, {**_overrides(args), "seed": args.seeds[0]})
    values = args.values
    if values is not None and args.param == "weights":
        values = [tuple(float(x) for x in v.split(",")) for v in values]
    elif values is not None and args.param == "rank":
        values = [int(v) for v in values]
    elif values is not None and args.param == "temperature":
        values = [float(v) for v in values]
    rows = run_sweep(config, args.param, values, args.seeds, resolve_output_root(args.output, config), args.jobs)
    _emit(render_ablation(args.param, rows, args.format), args.out)
    return 0


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="YAML experiment configuration")
    parser.add_argument("--seed", type=int, help="run seed (seeds and sweep take --seeds instead)")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--strategy", choices=["probe", "finetune", "lora", "distill-two-step", "slad"])
    parser.add_argument("--mapping", choices=["first", "last", "even"])
    parser.add_argument("--rank", type=int)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--output", help="output root (overrides SLAD_OUTPUT_ROOT and the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dartfx-slad", description="Shared-adapter teacher/student distillation laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="comparison table over finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cka", help="recompute CKA tables of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--probe-size", type=int)
    p.add_argument("--token", choices=["cls", "mean"])
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("synth", help="export a synthetic dataset as an image folder")
    p.add_argument("out_dir")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain an aligned teacher/student encoder pair on a source task")
    p.add_argument("out_dir")
    p.add_argument("--config", help="YAML pretraining configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--teacher-epochs", type=int)
    p.add_argument("--student-epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("seeds", help="run a config over several seeds and report means")
    _add_config_arguments(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_seeds)

    p = sub.add_parser("sweep", help="ablation over one knob")
    _add_config_arguments(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("--values", nargs="+", help="settings to try; weights are given as kl,t,s")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
    try:
        return args.func(args)
    except NumericalError as exc:
        logging.error(f"training diverged: {exc}")
        return 2
    except SladError as exc:
        logging.error(str(exc))
        return 1


if __name__ == "__main__":  # no cov
    sys.exit(main())
