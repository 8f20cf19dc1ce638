"""Command-line entry point.

Subcommands: bandit-train, vae-train, verify, bench. Every RunConfig key is
available as a kebab-case flag and overrides the optional JSON config file.
Artifacts land in a run directory named from the config digest plus seed;
nothing is written if validation fails. Exit codes: 0 success, 2
configuration error, 3 numeric error, 4 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, parse_config
from .errors import ConfigError, DataFormatError, NumericError
from .fhnca import save_vae
from .harness import bandit_train, run_bench, vae_train
from .netcore import save_net
from .oracle import run_verification

_SUBCOMMANDS = {
    "bandit-train": "bandit",
    "vae-train": "vae",
    "verify": "verify",
    "bench": "bench",
}

_FLAG_SKIP = {"mode"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hnca",
        description="Train discrete stochastic networks with hindsight credit assignment; "
        "verify the estimators against enumeration oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, mode in _SUBCOMMANDS.items():
        p = sub.add_parser(command, help=f"run in {mode} mode")
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        for f in fields(RunConfig):
            if f.name in _FLAG_SKIP:
                continue
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f.name, default=None, type=_flag_parser(f.name))
    return parser


def _flag_parser(name: str):
    from .config import _FLOAT_KEYS, _INT_KEYS

    if name in _INT_KEYS:
        return int
    if name in _FLOAT_KEYS:
        return float
    return str


def run(cfg: RunConfig) -> Path:
    """Dispatch one validated config; returns the run directory."""
    run_dir = Path(cfg.out_dir) / f"{cfg.digest()}-s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved-config.json").write_text(cfg.to_json())

    if cfg.mode == "bandit":
        metrics, net = bandit_train(cfg)
        metrics.write(run_dir / "metrics.csv")
        save_net(net, run_dir / "model.bin")
    elif cfg.mode == "vae":
        metrics, model = vae_train(cfg)
        metrics.write(run_dir / "metrics.csv")
        save_vae(model, run_dir / "model.bin")
    elif cfg.mode == "verify":
        report = run_verification(cfg.verify_samples, cfg.seed)
        (run_dir / "verify.json").write_text(json.dumps(report, indent=2) + "\n")
        for gate in report["gates"]:
            status = "pass" if gate["passed"] else "FAIL"
            print(f"{status}  {gate['instance']:10s} {gate['estimator']:18s} "
                  f"max|z| = {gate['max_abs_z']:.2f}")
        if not report["all_passed"]:
            raise SystemExit(1)
    elif cfg.mode == "bench":
        report = run_bench(depth=cfg.depth, reps=cfg.bench_reps, seed=cfg.seed)
        (run_dir / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"{'width':>6} {'edges':>9} {'fwd us':>9} {'bwd us':>9} {'ratio':>6}")
        for row in report["rows"]:
            print(f"{row['width']:>6} {row['edges']:>9} {row['forward_us']:>9.1f} "
                  f"{row['backward_us']:>9.1f} {row['ratio']:>6.2f}")
        print(f"linear fit: {report['fit_us_per_edge']*1e3:.3f} ns/edge, "
              f"max residual {report['max_fit_residual']:.1%}")
    return run_dir


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if f.name not in _FLAG_SKIP and getattr(args, f.name, None) is not None
    }
    overrides["mode"] = _SUBCOMMANDS[args.command]
    if args.command == "bench" and "depth" not in overrides:
        overrides["depth"] = 2
    try:
        cfg = parse_config(args.config, overrides)
        run(cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
