"""Command-line entry point: ``rdmguard {simulate,detect,calibrate,timing}``.

Exit status is 0 on success, 2 for a bad config or arguments and 3 when the
run itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .detector import DetectionTrace, DetectorConfig, calibrate_epsilon_d, detect
from .errors import ConfigError
from .experiment import load_config, run_experiment, timing_scan
from .representation import read_matrix_csv

log = logging.getLogger("rdmguard")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.mode is not None:
        cfg = replace(cfg, detector=replace(cfg.detector or DetectorConfig(), mode=args.mode))
    report = run_experiment(cfg, _out_dir(args), record_timing=args.record_timing)
    print(json.dumps(report.get("summary", {}), sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    try:
        cfg = DetectorConfig(delta=args.delta, epsilon_d=args.epsilon_d, mode=args.mode or "refined")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    mat = read_matrix_csv(args.matrix)
    trace = DetectionTrace()
    dec = detect(mat, cfg, trace)
    out = _out_dir(args)
    (out / "decisions.csv").write_text(",".join(str(int(d)) for d in dec) + "\n")
    (out / "trace.json").write_text(json.dumps(trace.to_dict(), indent=2, sort_keys=True) + "\n")
    print(",".join(str(int(d)) for d in dec))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    eps = calibrate_epsilon_d([read_matrix_csv(p) for p in args.matrices])
    out = _out_dir(args)
    (out / "epsilon_d.json").write_text(json.dumps({"epsilon_d": eps, "matrices": len(args.matrices)}) + "\n")
    print(repr(eps))
    return EXIT_OK


def cmd_timing(args) -> int:
    if any(n < 3 for n in args.clients) or any(b < 1 for b in args.per_class):
        raise ConfigError("timing grid needs clients >= 3 and per-class samples >= 1")
    rows = timing_scan(args.clients, args.per_class, seed=args.seed or 0, repeats=args.repeats,
                       out_path=_out_dir(args) / "timing.csv")
    for r in rows:
        print(f"N={r['clients']} b={r['per_class']} {r['seconds']:.4f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdmguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a full experiment from a JSON config")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", default="out")
    s.add_argument("--mode", choices=["basic", "refined"])
    s.add_argument("--record-timing", action="store_true", help="write wall-clock detection times to the round CSVs")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="run the detector on a distance-matrix CSV")
    d.add_argument("matrix")
    d.add_argument("--delta", type=float, default=1.5)
    d.add_argument("--epsilon-d", type=float)
    d.add_argument("--mode", choices=["basic", "refined"])
    d.add_argument("--seed", type=int, help="accepted for interface symmetry; detection is deterministic")
    d.add_argument("--out-dir", default="out")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("calibrate", help="distance bound from honest-round matrices")
    c.add_argument("matrices", nargs="+")
    c.add_argument("--seed", type=int, help="accepted for interface symmetry")
    c.add_argument("--out-dir", default="out")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("timing", help="detection time over a grid of client counts and stimulus sizes")
    t.add_argument("--clients", type=int, nargs="+", default=[10, 20])
    t.add_argument("--per-class", type=int, nargs="+", default=[20, 40])
    t.add_argument("--repeats", type=int, default=3)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", default="out")
    t.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
