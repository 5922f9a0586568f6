"""Command-line entry point: ``finer <command> [--config FILE] [flags]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error. Failures
also print one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from finer import pipeline
from finer.config import ConfigError, ExperimentConfig
from finer.ensemble import SCENARIOS

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("finer")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finer", description="Explanation-guided risk detection benchmark.")
    p.add_argument("command", choices=pipeline.STAGES + ("all",))
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults are used if omitted)")
    p.add_argument("--seed", type=int, help="master seed; overrides the config")
    p.add_argument("--out", type=Path, help="output directory; overrides the config")
    p.add_argument("--scenario", choices=tuple(SCENARIOS), action="append",
                   help="ensemble scenario(s) for explain; repeatable")
    p.add_argument("--k", type=int, help="number of ICs in an explanation / masked for MPD")
    p.add_argument("--jobs", type=int, help="worker processes for per-sample work")
    p.add_argument("--lock-timeout", type=float, default=-1,
                   help="seconds to wait for the output-directory lock (-1 waits forever)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("FINER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"status": "error", "code": code, "kind": kind, "message": str(exc)}), file=sys.stderr)
    return code


def dispatch(command: str, run: pipeline.Run, scenarios=None, k=None) -> None:
    if command == "gen-data":
        pipeline.gen_data(run)
    elif command == "train":
        pipeline.train(run)
    elif command == "finetune":
        pipeline.finetune_stage(run)
    elif command == "explain":
        pipeline.explain(run, scenarios, k)
    elif command == "eval":
        pipeline.evaluate(run, k)
    elif command == "ablate":
        pipeline.ablate(run)
    elif command == "report":
        pipeline.report(run)
    elif command == "all":
        for stage in pipeline.STAGES:
            dispatch(stage, run, scenarios, k)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config).override(
            seed=args.seed, out=str(args.out) if args.out else None, k=args.k, jobs=args.jobs,
            scenarios=args.scenario)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command in ("gen-data", "all"):
        (out / "config.yaml").write_text(cfg.dump())
    lock = FileLock(str(out / ".finer.lock"))
    try:
        with lock.acquire(timeout=args.lock_timeout):
            dispatch(args.command, pipeline.Run(cfg), args.scenario, args.k)
    except Timeout as exc:
        return _fail(EXIT_RUNTIME, "locked", exc)
    except pipeline.DataError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except Exception as exc:  # model/explainer failures mid-run
        log.exception("command %s failed", args.command)
        return _fail(EXIT_RUNTIME, type(exc).__name__, exc)
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out),
                      "config_hash": cfg.hash(), "seed": cfg.seed}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
