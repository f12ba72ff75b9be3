"""``spikekit`` command line.

Exit status: 0 success, 2 usage or configuration error, 3 data or
checkpoint error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys

from ..errors import ConfigError, DataError, LoadError, NumericError, UsageError
from .config import TASKS, RunConfig, load_config, parse_config
from .tasks import RUNNERS, SWEEP_AXES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("time steps must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--time-steps", type=_int_list, metavar="LIST", help="e.g. 1,2,4")
    common.add_argument("--variant", choices=("ssa", "a_i", "a_relu", "a_leakyrelu", "a_softmax", "vsa"))
    common.add_argument("--stem", choices=("sps", "scs"))
    common.add_argument("--residual", choices=("add", "iand"))
    common.add_argument("--mask-ratio", type=float)
    common.add_argument("--out", help="parent directory for run folders")
    common.add_argument("--model", help="model name such as spikformer-2-64 or spikformer-v2-2-64")
    common.add_argument("--heads", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--samples", type=int, help="synthetic dataset size")
    common.add_argument("--data", help="CIFAR-10 binary batch file or directory")
    common.add_argument("--checkpoint", help="input checkpoint")

    p = argparse.ArgumentParser(prog="spikekit", description="Spiking transformer experiments")
    sub = p.add_subparsers(dest="task", required=True)
    for task in TASKS:
        sp = sub.add_parser(task, parents=[common])
        if task == "sweep":
            sp.add_argument("--axis", choices=SWEEP_AXES, required=True)
            sp.add_argument("--values", default="", help="comma-separated values")
    return p


def config_from_args(args) -> RunConfig:
    base = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    base["task"] = args.task
    model, data, train = dict(base["model"]), dict(base["data"]), dict(base["train"])
    if args.model:
        model = {"name": args.model, **{k: v for k, v in model.items() if k != "name"}}
    for key, val in (("variant", args.variant), ("stem", args.stem), ("residual", args.residual),
                     ("heads", args.heads)):
        if val is not None:
            model[key] = val
    if args.time_steps:
        base["time_steps"] = args.time_steps
        model["time_steps"] = args.time_steps[0]
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size), ("lr", args.lr)):
        if val is not None:
            train[key] = val
    if args.samples is not None:
        data["samples"] = args.samples
    if args.data:
        data.update(source="cifar10", path=args.data)
    if args.task == "pretrain" and "stem" not in model and "name" not in model:
        model["stem"] = "scs"
    base.update(model=model, data=data, train=train)
    for key, val in (("seed", args.seed), ("mask_ratio", args.mask_ratio), ("out", args.out),
                     ("checkpoint", args.checkpoint)):
        if val is not None:
            base[key] = val
    if args.task == "sweep":
        base["sweep_axis"] = args.axis
        base["sweep_values"] = [v for v in args.values.split(",") if v.strip()]
    return parse_config(base)


def _limit_threads():
    n = os.environ.get("SPIKEKIT_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise ConfigError(f"SPIKEKIT_THREADS must be an integer, got {n!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        limiter = _limit_threads()
        cfg = config_from_args(args)
        result = RUNNERS[cfg.task](cfg, stream=sys.stdout)
        if limiter is not None:
            limiter.restore_original_limits()
        if "run_dir" in result:
            print(f"run directory: {result['run_dir']}")
        return EXIT_OK
    except (ConfigError, UsageError) as e:
        print(f"spikekit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LoadError) as e:
        print(f"spikekit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"spikekit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
