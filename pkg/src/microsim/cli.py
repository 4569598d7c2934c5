"""Command line front end.

Subcommands ``generate``, ``ipf``, ``integerise``, ``evaluate`` and
``pipeline``. Options may also come from a YAML ``--config`` file whose keys
are the long option names (``-`` or ``_``); explicit flags win.

Exit codes: 0 success, 1 numeric/model error, 2 input error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import InputError, MicrosimError, ModelError, ZoneError
from .ingest import build_indicator, load_category_map, load_constraints, load_survey
from .integerise import (
    METHODS,
    PROBABILISTIC,
    integerise_weights,
    read_integerised,
    run_ensemble,
    write_selections,
    write_summary,
)
from .ipf import (
    aggregate,
    ipf_run,
    read_weights_binary,
    read_weights_csv,
    write_weights_binary,
    write_weights_csv,
)
from .metrics import full_report, simulated_table, write_diffs_csv, write_reports_csv, write_reports_json
from .synthgen import PopulationSpec, generate, load_population_spec, write_synthetic

log = logging.getLogger("microsim")

DEFAULTS = {
    "iterations": 20,
    "tolerance": None,
    "methods": list(METHODS),
    "runs": 20,
    "seed": 1000,
    "threads": 1,
    "mode": "strict",
    "rounding": "half_up",
    "step": 0.001,
    "binary": False,
    "timings": False,
    "constraints": None,
    "survey": None,
    "map": None,
    "spec": None,
    "spec_seed": None,
    "weights": None,
    "integerised": None,
    "out": None,
}


@dataclass
class RunConfig:
    survey: str | None = None
    constraints: list[str] | None = None
    map: str | None = None
    spec: str | None = None
    spec_seed: int | None = None
    weights: str | None = None
    integerised: str | None = None
    iterations: int = 20
    tolerance: float | None = None
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    runs: int = 20
    seed: int | None = 1000
    threads: int = 1
    mode: str = "strict"
    rounding: str = "half_up"
    step: float = 0.001
    binary: bool = False
    timings: bool = False
    out: str | None = None

    def validate(self) -> None:
        if not self.methods:
            raise InputError("select at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InputError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        if any(m in PROBABILISTIC for m in self.methods) and self.seed is None:
            raise InputError("a seed is required for probabilistic methods")
        if self.iterations < 1:
            raise InputError("--iterations must be >= 1")
        if self.runs < 1:
            raise InputError("--runs must be >= 1")
        if self.threads < 1:
            raise InputError("--threads must be >= 1")

    def echo(self) -> dict:
        """Config as recorded in the manifest.

        Output location, thread count and the timing flag are left out: they
        do not change results, and leaving them out keeps output trees
        byte-identical across machines and thread counts.
        """
        skip = {"out", "threads", "timings"}
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in skip}


def _split_methods(values) -> list[str]:
    out = []
    for v in values if isinstance(values, (list, tuple)) else [values]:
        out += [m.strip() for m in str(v).split(",") if m.strip()]
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with path.open(encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a mapping")
        for k, v in data.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise InputError(f"{path}: unknown config key {k!r}")
            cfg[key] = v
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if isinstance(cfg["constraints"], str):
        cfg["constraints"] = [cfg["constraints"]]
    cfg["methods"] = _split_methods(cfg["methods"])
    rc = RunConfig(**cfg)
    rc.validate()
    return rc


# ---------------------------------------------------------------------------
# output helpers

@contextlib.contextmanager
def atomic_dir(target: Path):
    """Build a directory under a temporary name, then rename it into place."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.parent / f".{target.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if target.exists():
        old = target.parent / f".{target.name}.old-{os.getpid()}"
        os.replace(target, old)
    os.replace(tmp, target)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _versions() -> dict:
    return {"microsim": __version__, "numpy": np.__version__,
            "python": platform.python_version()}


def write_manifest(directory: Path, command: str, cfg: RunConfig, seeds: dict,
                   timings: dict | None = None, extra: dict | None = None) -> Path:
    data = {
        "command": command,
        "config": cfg.echo(),
        "versions": _versions(),
        "seeds": seeds,
    }
    if extra:
        data.update(extra)
    if cfg.timings and timings is not None:
        data["timings_s"] = timings
    path = directory / "manifest.json"
    with path.open("w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class _Timer:
    def __init__(self):
        self.times = {}

    @contextlib.contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        yield
        self.times[name] = round(time.perf_counter() - t0, 6)


# ---------------------------------------------------------------------------
# stages

def load_inputs(cfg: RunConfig):
    if not cfg.survey or not cfg.constraints or not cfg.map:
        raise InputError("need --survey, --constraints and --map")
    for p in [cfg.survey, cfg.map, *cfg.constraints]:
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    cmap = load_category_map(cfg.map)
    survey = load_survey(cfg.survey, cmap.schema)
    cs = load_constraints(cfg.constraints, mode=cfg.mode)
    B = build_indicator(survey, cmap, cs)
    return survey, cs, cmap, B


def stage_generate(cfg: RunConfig, outdir: Path):
    spec = load_population_spec(cfg.spec) if cfg.spec else PopulationSpec()
    if cfg.spec_seed is not None:
        spec = PopulationSpec.from_dict({**spec.to_dict(), "seed": cfg.spec_seed})
    data = generate(spec)
    paths = write_synthetic(data, outdir)
    return data, paths


def stage_ipf(cfg: RunConfig, outdir: Path, cs, B):
    wm, trace = ipf_run(None, cs, iterations=cfg.iterations, tolerance=cfg.tolerance,
                        indicator=B, threads=cfg.threads)
    outdir.mkdir(parents=True, exist_ok=True)
    write_weights_csv(wm, outdir / "weights.csv")
    if cfg.binary:
        write_weights_binary(wm, outdir / "weights.mswm")
    trace.write_csv(outdir / "trace.csv")
    if trace.empty_cells:
        with (outdir / "empty_cells.csv").open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["zone", "constraint", "category", "census"])
            for z, con, k, target in trace.empty_cells:
                wr.writerow([cs.zones[z], con, cs[con].categories[k], repr(target)])
    return wm, trace


def stage_integerise(cfg: RunConfig, outdir: Path, wm, cs, B):
    results, seeds = {}, {}
    pops = cs.populations
    U = cs.table
    outdir.mkdir(parents=True, exist_ok=True)
    opts = {"rounding": cfg.rounding}
    for method in cfg.methods:
        mdir = outdir / method
        mdir.mkdir(exist_ok=True)
        if method in PROBABILISTIC:
            ens = run_ensemble(method, wm, pops, B, U, cfg.runs, cfg.seed, threads=cfg.threads)
            zones = ens.best
            with (mdir / "runs.csv").open("w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["run", "run_seed", "tae", "best"])
                for r, (s, t) in enumerate(zip(ens.run_seeds, ens.taes)):
                    wr.writerow([r, s, repr(float(t)), int(r == ens.best_index)])
            seeds[method] = {"master_seed": ens.master_seed, "best_run": ens.best_index,
                             "run_seeds": ens.run_seeds}
        else:
            method_opts = {"step": cfg.step} if method == "threshold" else opts
            zones = integerise_weights(method, wm, pops, threads=cfg.threads, **method_opts)
        write_selections(zones, mdir / "selections.csv")
        write_summary(zones, mdir / "summary.csv")
        results[method] = zones
    return results, seeds


def stage_evaluate(cfg: RunConfig, outdir: Path, wm, cs, B, results: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    U = cs.table
    reports = []
    tables = {}
    if wm is not None:
        T = aggregate(wm, B)
        reports.append(full_report(cs, T, method="ipf"))
        tables["ipf"] = T
    for method, zones in results.items():
        T = simulated_table(zones, B)
        reports.append(full_report(cs, T, zones, cs.populations, method=method))
        tables[method] = T
    write_reports_csv(reports, outdir / "report.csv")
    write_reports_json(reports, outdir / "report.json")
    write_diffs_csv(reports, outdir / "popdiff.csv")
    labels = cs.column_labels
    with (outdir / "plot.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "zone", "constraint", "category", "census", "simulated"])
        for method, T in tables.items():
            for z, zone in enumerate(cs.zones):
                for k, (con, cat) in enumerate(labels):
                    wr.writerow([method, zone, con, cat, repr(float(U[z, k])), repr(float(T[z, k]))])
    return reports


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig) -> int:
    with atomic_dir(Path(cfg.out)) as tmp:
        data, _ = stage_generate(cfg, tmp)
        write_manifest(tmp, "generate", cfg, {"spec_seed": data.spec.seed},
                       extra={"redraws": data.redraws})
    return 0


def cmd_ipf(cfg: RunConfig) -> int:
    timer = _Timer()
    with timer("ingest"):
        _, cs, _, B = load_inputs(cfg)
    with atomic_dir(Path(cfg.out)) as tmp:
        with timer("ipf"):
            _, trace = stage_ipf(cfg, tmp, cs, B)
        write_manifest(tmp, "ipf", cfg, {}, timer.times,
                       extra={"final_tae": trace.final_tae, "feasible": trace.feasible})
    return 0


def _load_weights(cfg: RunConfig, cs):
    if not cfg.weights:
        raise InputError("need --weights")
    p = Path(cfg.weights)
    if not p.exists():
        raise FileNotFoundError(f"weights file not found: {p}")
    if p.suffix == ".mswm":
        return read_weights_binary(p, cs.zones)
    return read_weights_csv(p)


def cmd_integerise(cfg: RunConfig) -> int:
    timer = _Timer()
    _, cs, _, B = load_inputs(cfg)
    wm = _load_weights(cfg, cs)
    if wm.w.shape != (B.n_individuals, cs.n_zones):
        raise InputError(f"weights shape {wm.w.shape} does not match "
                         f"{B.n_individuals} individuals x {cs.n_zones} zones")
    with atomic_dir(Path(cfg.out)) as tmp:
        with timer("integerise"):
            _, seeds = stage_integerise(cfg, tmp, wm, cs, B)
        write_manifest(tmp, "integerise", cfg, seeds, timer.times)
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    _, cs, _, B = load_inputs(cfg)
    wm = _load_weights(cfg, cs) if cfg.weights else None
    if not cfg.integerised:
        raise InputError("need --integerised (an integerise output directory)")
    root = Path(cfg.integerised)
    if not root.is_dir():
        raise FileNotFoundError(f"integerised directory not found: {root}")
    results = {}
    for method in cfg.methods:
        sel, summ = root / method / "selections.csv", root / method / "summary.csv"
        if not sel.exists() or not summ.exists():
            continue
        results[method] = read_integerised(sel, summ, B.n_individuals, method)
    if not results:
        raise InputError(f"no integerised results for {cfg.methods} under {root}")
    with atomic_dir(Path(cfg.out)) as tmp:
        stage_evaluate(cfg, tmp, wm, cs, B, results)
        write_manifest(tmp, "evaluate", cfg, {})
    return 0


def cmd_pipeline(cfg: RunConfig) -> int:
    timer = _Timer()
    with atomic_dir(Path(cfg.out)) as tmp:
        seeds = {}
        if cfg.spec or not cfg.survey:
            with timer("generate"):
                data, paths = stage_generate(cfg, tmp / "inputs")
            seeds["spec_seed"] = data.spec.seed
            cs, B = data.constraints, build_indicator(data.survey, data.cmap, data.constraints)
        else:
            with timer("ingest"):
                _, cs, _, B = load_inputs(cfg)
        with timer("ipf"):
            wm, trace = stage_ipf(cfg, tmp / "ipf", cs, B)
        with timer("integerise"):
            results, s = stage_integerise(cfg, tmp / "integerise", wm, cs, B)
        seeds.update(s)
        with timer("evaluate"):
            stage_evaluate(cfg, tmp / "evaluate", wm, cs, B, results)
        write_manifest(tmp, "pipeline", cfg, seeds, timer.times,
                       extra={"final_tae": trace.final_tae, "feasible": trace.feasible})
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "ipf": cmd_ipf,
    "integerise": cmd_integerise,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microsim", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inputs=True):
        sp.add_argument("--config", help="YAML file of option values")
        sp.add_argument("--out", required=False, help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads (default 1)")
        sp.add_argument("--timings", action="store_true", default=None,
                        help="record stage wall times in the manifest")
        if inputs:
            sp.add_argument("--survey")
            sp.add_argument("--constraints", nargs="+", action="extend",
                            help="constraint CSVs, in application order")
            sp.add_argument("--map", help="category map (YAML)")
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--strict", dest="mode", action="store_const", const="strict")
            g.add_argument("--lenient", dest="mode", action="store_const", const="lenient")

    def fitting(sp):
        sp.add_argument("--iterations", type=int, help="IPF passes (default 20)")
        sp.add_argument("--tolerance", type=float, help="early-exit TAE improvement")
        sp.add_argument("--binary", action="store_true", default=None,
                        help="also write weights.mswm")

    def integerising(sp):
        sp.add_argument("--methods", nargs="+", action="extend",
                        help=f"any of {', '.join(METHODS)} (comma or space separated)")
        sp.add_argument("--runs", type=int, help="runs per probabilistic method (default 20)")
        sp.add_argument("--seed", type=int, help="master seed (default 1000)")
        sp.add_argument("--rounding", choices=["half_up", "half_even"])
        sp.add_argument("--step", type=float, help="threshold band width (default 0.001)")

    g = sub.add_parser("generate", help="write a synthetic population and its inputs")
    common(g, inputs=False)
    g.add_argument("--spec", help="population spec (YAML)")
    g.add_argument("--spec-seed", type=int, help="override the population spec seed")

    s = sub.add_parser("ipf", help="fit weights")
    common(s)
    fitting(s)

    s = sub.add_parser("integerise", help="integerise a weight file")
    common(s)
    s.add_argument("--weights", help="weights.csv or weights.mswm")
    integerising(s)

    s = sub.add_parser("evaluate", help="score integerised results")
    common(s)
    s.add_argument("--weights", help="IPF weights, for the baseline row")
    s.add_argument("--integerised", help="integerise output directory")
    s.add_argument("--methods", nargs="+", action="extend")

    s = sub.add_parser("pipeline", help="generate/ingest, fit, integerise, evaluate")
    common(s)
    s.add_argument("--spec", help="population spec (YAML); used when no --survey")
    s.add_argument("--spec-seed", type=int)
    fitting(s)
    integerising(s)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if not cfg.out:
            raise InputError("--out is required")
        return COMMANDS[args.command](cfg)
    except ZoneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.error, ModelError) else 2
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InputError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MicrosimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
