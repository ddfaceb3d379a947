"""Command-line entry point: ``tntlab <command> [--config cfg.json] [--section.key=value ...]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import equivariance as eq
from .config import ExperimentConfig, parse_override
from .errors import ConfigError, TNTError
from .events import decode_aer, encode_aer, read_text, write_text
from .experiment import (
    _log_csv,
    audit,
    build_dataset,
    load_model,
    run_experiment,
    samples,
    save_model,
)
from .flow_sim import TEST, TRAIN, write_dataset
from .pipeline import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

logger = logging.getLogger("tntlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args, overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    parsed = dict(parse_override(o) for o in overrides)
    if parsed:
        cfg = cfg.with_overrides(parsed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=str(args.out))
    return cfg.validate()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# --- commands -------------------------------------------------------------------

def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    cfg = replace(cfg, dataset=None, simulate=True)
    ds = build_dataset(cfg, args.jobs)
    root = cfg.resolved_output_dir() / "dataset"
    write_dataset(ds, root, {"config_hash": cfg.config_hash()})
    print(f"wrote {len(ds.items)} streams to {root}")
    return EXIT_OK


def verify_checks(n_trials: int, seed: int, n_identity: int = 10_000) -> tuple:
    """(checks, reports): each check is {value, threshold, passed}."""
    reports = eq.run_trials(n_trials, seed)
    raw = np.array([r.residual_raw for r in reports])
    tnt = np.array([r.residual_tnt for r in reports])
    ratio = np.array([r.ratio for r in reports])
    checks = {
        "shear_tnt_identity": (eq.shear_tnt_identity_error(n_identity, seed), 1e-12, "<="),
        "centering_invariance": (eq.centering_invariance_error(n_identity, seed), 1e-12, "<="),
        "max_residual_tnt": (float(tnt.max()), 1e-6, "<="),
        "median_ratio": (float(np.median(ratio)), 5.0, ">="),
        "fraction_raw_above_1e-3": (float(np.mean(raw > 1e-3)), 0.95, ">="),
    }
    out = {}
    for name, (value, thr, op) in checks.items():
        ok = value <= thr if op == "<=" else value >= thr
        out[name] = {"value": value, "threshold": thr, "op": op, "passed": bool(ok)}
    return out, reports


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    checks, reports = verify_checks(args.trials, cfg.seed)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    eq.write_reports(reports, out / "verify_trials.jsonl", out / "verify_trials.csv", {"config_hash": h})
    (out / "verify_summary.json").write_text(json.dumps({"config_hash": h, "checks": checks}, indent=1,
                                                        sort_keys=True) + "\n", encoding="utf-8")
    for name, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: {c['value']:.3e} {c['op']} {c['threshold']:g}")
    return EXIT_OK if all(c["passed"] for c in checks.values()) else EXIT_CHECK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    ds = build_dataset(cfg, args.jobs)
    pcfg = replace(cfg.pipeline, variant=args.variant)
    model, log = train(samples(ds, TRAIN, args.train_set), pcfg, seed=cfg.seed, n_classes=ds.n_classes)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    path = Path(args.model) if args.model else out / f"model_{args.variant}_{args.train_set}.tnnw"
    save_model(model, path, h)
    (out / f"train_log_{args.variant}_{args.train_set}.csv").write_text(_log_csv(log, h), encoding="utf-8")
    print(f"saved {path} (final loss {log[-1]['loss']:.4f})" if log else f"saved {path}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    model, model_hash = load_model(args.model)
    ds = build_dataset(cfg, args.jobs)
    res = evaluate(model, samples(ds, TEST, args.test_set), f"?/{args.test_set}")
    record = {"config_hash": model_hash, "variant": model.cfg.variant, **res.to_dict()}
    if args.result:
        Path(args.result).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _print_json({"accuracy": res.accuracy, "n": res.n, "split": res.split})
    return EXIT_OK


def cmd_decode(args, cfg) -> int:
    stream = decode_aer(Path(args.input).read_bytes(), args.width, args.height)
    write_text(stream, args.output)
    print(f"decoded {len(stream)} events")
    return EXIT_OK


def cmd_encode(args, cfg) -> int:
    stream = read_text(args.input, args.width, args.height)
    Path(args.output).write_bytes(encode_aer(stream))
    print(f"encoded {len(stream)} events")
    return EXIT_OK


def cmd_run(args, cfg: ExperimentConfig) -> int:
    results = run_experiment(cfg, jobs=args.jobs)
    out = cfg.resolved_output_dir()
    print((out / "summary.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK if results else EXIT_RUNTIME


def cmd_audit(args, cfg) -> int:
    root = Path(args.directory)
    cfg = ExperimentConfig.load(args.config) if args.config else None
    bad = audit(root, cfg)
    for path, h in bad:
        print(f"MISMATCH {path}: {h}")
    if not bad:
        print("all artifacts match the config hash")
    return EXIT_CHECK if bad else EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tntlab", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, helptext):
        return sub.add_parser(name, help=helptext, allow_abbrev=False)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--out", help="output directory (default: $TNT_OUTPUT_DIR or ./tnt_output)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
        return sp

    common(add("simulate", "render the glyph dataset"))
    sp = common(add("verify", "run the equivariance checks"))
    sp.add_argument("--trials", type=int, default=100)
    sp = common(add("train", "train one variant"))
    sp.add_argument("--variant", default="tnt")
    sp.add_argument("--train-set", default="1", choices=["1", "all"])
    sp.add_argument("--model", help="weights path (default: <out>/model_<variant>_<set>.tnnw)")
    sp = common(add("eval", "evaluate a saved model"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--test-set", default="all", choices=["1", "all"])
    sp.add_argument("--result", help="write the EvalResult JSON here")
    for name, helptext in (("decode", "AER binary -> text events"), ("encode", "text events -> AER binary")):
        sp = add(name, helptext)
        sp.add_argument("input")
        sp.add_argument("output")
        sp.add_argument("--width", type=int, default=34)
        sp.add_argument("--height", type=int, default=34)
    common(add("run", "full experiment: dataset, training, evaluation, summary"))
    sp = add("audit", "check artifacts against a config hash")
    sp.add_argument("directory")
    sp.add_argument("--config", help="config to check against (default: <directory>/config.json)")
    return p


COMMANDS = {
    "simulate": cmd_simulate, "verify": cmd_verify, "train": cmd_train, "eval": cmd_eval,
    "decode": cmd_decode, "encode": cmd_encode, "run": cmd_run, "audit": cmd_audit,
}
CONFIG_COMMANDS = {"simulate", "verify", "train", "eval", "run"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = [r for r in rest if r.startswith("--") and "=" in r]
        unknown = [r for r in rest if r not in overrides]
        if unknown:
            raise UsageError(f"unrecognized arguments: {' '.join(unknown)}")
        if overrides and args.command not in CONFIG_COMMANDS:
            raise UsageError(f"{args.command} takes no config overrides")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args, overrides) if args.command in CONFIG_COMMANDS else None
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TNTError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
