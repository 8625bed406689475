"""Command-line entry point.

Subcommands: gen, train, sweep, eval, report, gradcheck.  Each reads an
optional ``key = value`` config file; flags and ``--set key=value`` override
individual keys and the resolved result is written as ``resolved.cfg`` in the
run directory.  Run directories live under ``$CROSSTALK_MTL_OUTPUT`` (default
``./runs``) and are named ``<command>-<config hash>-<timestamp>``.

Exit status: 0 on success, 1 when a run or check fails, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

from .benchmarks import GenSpec, build_dataset
from .config import config_hash, format_kv, load_kv, split_list
from .datasets import load_manifest
from .errors import ConfigError, CrosstalkError, UsageError
from .experiment import TrainConfig, evaluate_predictions, read_dump, sweep, train_cell
from .metrics import RunReport
from .report import write_report, write_tables

OUTPUT_ENV = "CROSSTALK_MTL_OUTPUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def make_run_dir(command: str, resolved: dict) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = output_root() / f"{command}-{config_hash(resolved)}-{stamp}"
    path, n = base, 0
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(args, flag_map: dict[str, str]) -> dict[str, str]:
    """Config file, then --set pairs, then dedicated flags (highest precedence)."""
    values = load_kv(args.config) if getattr(args, "config", None) else {}
    values.update(_overrides(getattr(args, "set", None)))
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    return values


# ---------------------------------------------------------------- gen

_GEN_KEYS = {"benchmark", "sample_rate", "duration", "snr_db", "total", "seed", "split", "counts"}


def gen_spec(values: dict[str, str]) -> GenSpec:
    unknown = [k for k in values if k not in _GEN_KEYS and not k.startswith("ibr.")]
    if unknown:
        raise ConfigError(f"unknown gen keys: {', '.join(sorted(unknown))}")
    if "benchmark" not in values:
        raise ConfigError("gen needs 'benchmark' (drone or motor)")
    try:
        kw: dict = {"benchmark": values["benchmark"]}
        if "sample_rate" in values:
            kw["sample_rate"] = float(values["sample_rate"])
        if "duration" in values:
            kw["duration"] = float(values["duration"])
        if "snr_db" in values:
            lo, hi = (float(v) for v in split_list(values["snr_db"]))
            kw["snr_db"] = (lo, hi)
        if "total" in values:
            kw["total"] = int(values["total"])
        if "seed" in values:
            kw["seed"] = int(values["seed"])
        if "split" in values:
            kw["split"] = tuple(float(v) for v in split_list(values["split"]))
        if "counts" in values:
            kw["counts"] = [int(v) for v in split_list(values["counts"])]
        kw["target_ibr"] = {k[4:]: float(v) for k, v in values.items() if k.startswith("ibr.")}
    except ValueError as exc:
        raise ConfigError(f"bad gen value: {exc}") from exc
    return GenSpec(**kw)


def cmd_gen(args) -> int:
    values = resolve(args, {"seed": "seed", "benchmark": "benchmark", "total": "total"})
    spec = gen_spec(values)
    run_dir = make_run_dir("gen", values)
    out = Path(args.out) if args.out else run_dir / "dataset"
    manifest = build_dataset(spec, out)
    (run_dir / "resolved.cfg").write_text(format_kv(values))
    print(f"wrote {len(manifest.rows)} samples to {out}")
    print(f"manifest: {out / 'manifest.csv'}")
    return 0


# ---------------------------------------------------------------- train / sweep

_TRAIN_FLAGS = {"manifest": "manifest", "kind": "kind", "epochs": "epochs", "sensors": "sensors"}


def _train_config(values: dict[str, str], extra_keys=()) -> TrainConfig:
    return TrainConfig.from_kv({k: v for k, v in values.items() if k not in extra_keys})


def cmd_train(args) -> int:
    values = resolve(args, {**_TRAIN_FLAGS, "seed": "seeds"})
    cfg = _train_config(values)
    run_dir = make_run_dir("train", values)
    (run_dir / "resolved.cfg").write_text(format_kv(values))
    failed = False
    for seed in cfg.seeds:
        label = f"{cfg.kind}/seed{seed}"
        try:
            rec = train_cell(cfg, cfg.kind, seed, run_dir / f"{cfg.kind}_seed{seed}")
        except CrosstalkError as exc:
            print(f"FAILED {label}: {type(exc).__name__}: {exc}", file=sys.stderr)
            failed = True
            continue
        m = evaluate_predictions(read_dump(rec.dump), load_manifest(cfg.manifest), motor_headline=cfg.motor_headline)
        print(f"{label}: selected epoch {rec.selected_epoch or '-'}; " +
              ", ".join(f"{k}={v:.4f}" for k, v in m.items()))
    print(f"run directory: {run_dir}")
    return 1 if failed else 0


def save_sweep_meta(run_dir: Path, report: RunReport, setting: str) -> None:
    meta = {"setting": setting, "benchmark": report.benchmark, "seeds": ",".join(map(str, report.seeds)),
            "headline": report.headline}
    (run_dir / "sweep.meta").write_text(format_kv(meta))


def load_sweep_report(run_dir) -> tuple[str, RunReport]:
    """Rebuild the RunReport of a finished sweep directory."""
    run_dir = Path(run_dir)
    meta = load_kv(run_dir / "sweep.meta")
    rep = RunReport(meta["benchmark"], [int(s) for s in split_list(meta["seeds"])], headline=meta["headline"])
    setting = meta["setting"]
    path = run_dir / f"{setting}_scores.csv"
    try:
        rows = list(csv.DictReader(path.read_text().splitlines()))
    except OSError as exc:
        raise ConfigError(f"{run_dir} holds no finished sweep ({exc})") from exc
    grouped: dict[tuple[str, int], dict[str, float]] = {}
    for r in rows:
        grouped.setdefault((r["architecture"], int(r["seed"])), {})[r["metric"]] = float(r["value"])
    for (arch, seed), m in grouped.items():
        rep.add(arch, seed, m)
    return setting, rep


def cmd_sweep(args) -> int:
    values = resolve(args, {**_TRAIN_FLAGS, "seeds": "seeds", "architectures": "architectures",
                            "jobs": "jobs", "setting": "setting"})
    kinds = split_list(values.get("architectures", ",".join(("stl", "tcdcn", "mtan", "cs", "cc", "nddr", "rndr"))))
    jobs = int(values.get("jobs", "1"))
    setting = values.get("setting", "sweep")
    cfg = _train_config(values, extra_keys=("architectures", "jobs", "setting"))
    run_dir = make_run_dir("sweep", values)
    (run_dir / "resolved.cfg").write_text(format_kv(values))
    result = sweep(cfg, kinds, run_dir / "cells", jobs=jobs)
    write_tables(result.report, run_dir, setting)
    save_sweep_meta(run_dir, result.report, setting)
    print(result.report.to_text(), end="")
    for rec in result.records:
        if not rec.ok:
            print(f"FAILED cell {rec.label}: {rec.error}", file=sys.stderr)
    print(f"run directory: {run_dir}")
    return 0 if result.ok else 1


# ---------------------------------------------------------------- eval / report / gradcheck

def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    metrics = evaluate_predictions(read_dump(args.dump), manifest, split=args.split,
                                   motor_headline=args.motor_headline)
    for k, v in metrics.items():
        print(f"{k} = {v:.6f}")
    return 0


def cmd_report(args) -> int:
    reports = {}
    for d in args.sweeps:
        setting, rep = load_sweep_report(d)
        if setting in reports:
            setting = f"{setting}_{len(reports)}"
        reports[setting] = rep
    values = {"sweeps": ",".join(str(Path(d).resolve()) for d in args.sweeps), "figures": str(not args.no_figures)}
    out = Path(args.out) if args.out else make_run_dir("report", values)
    paths = write_report(reports, out, figures=not args.no_figures)
    for name, rep in reports.items():
        print(f"[{name}]")
        for r in rep.ranks():
            print(f"  {r.rank}. {r.architecture:<6} {r.score:.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import architecture_checks, layer_checks

    results = []
    if args.layers or args.all or not args.architectures:
        results += layer_checks(args.seed, args.tol)
    if args.architectures or args.all:
        results += architecture_checks(args.seed, args.tol)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crosstalk-mtl", description="Cross-talk multi-task learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    common(g)
    g.add_argument("--benchmark", choices=("drone", "motor"))
    g.add_argument("--seed", type=int)
    g.add_argument("--total", type=int)
    g.add_argument("--out", help="dataset directory (default: <run dir>/dataset)")
    g.set_defaults(func=cmd_gen)

    for name, func in (("train", cmd_train), ("sweep", cmd_sweep)):
        t = sub.add_parser(name, help=f"{name} models on a dataset manifest")
        common(t)
        t.add_argument("--manifest")
        t.add_argument("--epochs", type=int)
        t.add_argument("--sensors", choices=("A", "AB"))
        if name == "train":
            t.add_argument("--kind")
            t.add_argument("--seed", type=int)
        else:
            t.add_argument("--architectures", help="comma-separated list")
            t.add_argument("--seeds", help="comma-separated list")
            t.add_argument("--jobs", type=int)
            t.add_argument("--setting", help="name used for tables and figures")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="score a prediction dump")
    e.add_argument("--dump", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--motor-headline", choices=("compound", "component_mean"), default="compound")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tables and figures from sweep directories")
    r.add_argument("sweeps", nargs="+", help="sweep run directories")
    r.add_argument("--out")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--all", action="store_true", help="layers and architectures")
    c.add_argument("--layers", action="store_true")
    c.add_argument("--architectures", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrosstalkError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
