"""Command-line experiment driver.

Exit codes: 0 success, 1 configuration error, 2 runtime error. Errors are
reported as a single ``error: <kind>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import SWEEP_GRIDS, parse_config
from .errors import ConfigError, FedBiasError
from .experiment import run_experiment, run_sweep


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbias", description="Federated learning simulator with domain bias elimination.")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--algorithm", choices=["fedavg", "fedavg_dbe", "fedprox", "local"])
    p.add_argument("--seed", type=int, help="base seed (repeat r uses seed + r)")
    p.add_argument("--out-dir", help="directory for results.csv and summary.json")
    p.add_argument("--export-reps", action="store_true", help="also write per-sample representations")
    p.add_argument("--sweep", choices=sorted(SWEEP_GRIDS), help="run the built-in grid for one hyperparameter")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}", key="set")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.algorithm is not None:
        out["algorithm"] = args.algorithm
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out_dir is not None:
        out["out_dir"] = args.out_dir
    if args.export_reps:
        out["export_reps"] = "true"
    return out


def _fail(kind: str, exc: BaseException, code: int) -> int:
    reason = " ".join(str(exc).split())
    print(f"error: {kind}: {reason}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config, _overrides(args))
    except ConfigError as exc:
        return _fail("config", exc, 1)
    try:
        if args.sweep:
            for value, g, p in run_sweep(config, args.sweep, SWEEP_GRIDS[args.sweep]):
                print(f"{args.sweep}={value:g} global_acc={g:.4f} personalized_acc={p:.4f}")
        else:
            rows = run_experiment(config)
            last = rows[-1]
            print(
                f"wrote {len(rows)} rows to {config.out_dir}/results.csv "
                f"(last: global_acc={last.global_accuracy:.4f} personalized_acc={last.personalized_accuracy:.4f})"
            )
    except ConfigError as exc:
        return _fail("config", exc, 1)
    except (FedBiasError, OSError) as exc:
        return _fail("runtime", exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
