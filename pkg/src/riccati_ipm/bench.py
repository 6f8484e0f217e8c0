"""Batch benchmark harness: seeded instance sets, CSV records and a JSON summary."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .problems import PROBLEMS, problem_library
from .solver import SolverSettings, Status, solve

CSV_COLUMNS = ("instance_id", "status", "iters", "qp_count", "kkt_total", "kkt_stationarity",
               "kkt_eq", "kkt_ineq", "kkt_comp", "wall_ms", "per_qp_ms", "escapes", "refines")
TIMING_COLUMNS = ("wall_ms", "per_qp_ms")
QP_COUNT_DEFINITION = ("number of structured linear-system solves: one per SQP iteration without "
                       "inequalities, otherwise predictor + plain + corrector resolves, plus one "
                       "per iterative-refinement pass")
_SETTINGS_FIELDS = {f.name: f for f in dataclasses.fields(SolverSettings)}


@dataclass
class BenchmarkConfig:
    problem: str
    instances: int = 100
    seed: int = 0
    settings: dict = field(default_factory=dict)
    eq_mode: Optional[str] = None
    out: Optional[str] = None
    threads: int = 1
    params: dict = field(default_factory=dict)
    min_solved: Optional[int] = None  # acceptance threshold, default: all instances
    name: Optional[str] = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.instances < 1:
            raise ValueError("instances must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        unknown = set(self.settings) - set(_SETTINGS_FIELDS)
        if unknown:
            raise ValueError(f"unknown solver settings {sorted(unknown)}")
        self.solver_settings()

    @property
    def label(self):
        return self.name or self.problem

    @property
    def threshold(self):
        return self.instances if self.min_solved is None else self.min_solved

    def solver_settings(self) -> SolverSettings:
        kw = dict(self.settings)
        if self.eq_mode is not None:
            kw["eq_mode"] = self.eq_mode
        return SolverSettings(**kw)

    def instance_seeds(self):
        """Per-instance problem seeds, a pure function of ``seed`` and the instance count."""
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(self.instances)]


@dataclass
class BenchRecord:
    instance_id: int
    status: str
    iters: int
    qp_count: int
    kkt_total: float
    kkt_stationarity: float
    kkt_eq: float
    kkt_ineq: float
    kkt_comp: float
    wall_ms: float
    per_qp_ms: float
    escapes: int
    refines: int

    @property
    def solved(self):
        return self.status == Status.CONVERGED.label

    def row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


def _run_instance(config: BenchmarkConfig, settings: SolverSettings, instance_id: int, seed: int):
    t0 = time.perf_counter()
    try:
        problem = problem_library(config.problem, seed=seed, **config.params)
        _, rep = solve(problem, settings=settings)
    except Exception as exc:  # an instance failure is a record, not an abort
        wall = (time.perf_counter() - t0) * 1e3
        nan = float("nan")
        return BenchRecord(instance_id, f"Error:{type(exc).__name__}", 0, 0, nan, nan, nan, nan,
                           nan, wall, nan, 0, 0)
    wall = rep.wall_time * 1e3
    k = rep.kkt
    return BenchRecord(instance_id, rep.status.label, rep.iterations, rep.qp_count, k.total,
                       k.stationarity, k.eq_violation, k.ineq_violation, k.complementarity,
                       wall, wall / rep.qp_count if rep.qp_count else float("nan"),
                       rep.escapes, rep.refines)


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    records: list
    wall_time: float

    @property
    def solved(self):
        return sum(r.solved for r in self.records)

    @property
    def passed(self):
        return self.solved >= self.config.threshold

    def summary(self):
        iters = np.array([r.iters for r in self.records if r.solved], dtype=float)
        per_qp = np.array([r.per_qp_ms for r in self.records if math.isfinite(r.per_qp_ms)])
        quant = {}
        if iters.size:
            for q in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
                quant[f"q{int(q * 100)}"] = float(np.quantile(iters, q))
        return {
            "suite": self.config.label,
            "problem": self.config.problem,
            "instances": len(self.records),
            "solved": self.solved,
            "min_solved": self.config.threshold,
            "passed": self.passed,
            "seed": self.config.seed,
            "eq_mode": self.config.solver_settings().eq_mode,
            "abs_tol": self.config.solver_settings().abs_tol,
            "iteration_quantiles_solved": quant,
            "mean_per_qp_ms": float(per_qp.mean()) if per_qp.size else None,
            "total_wall_s": self.wall_time,
            "qp_count_definition": QP_COUNT_DEFINITION,
        }


def run_benchmark(config: BenchmarkConfig) -> BenchmarkResult:
    """Solve every instance; results are ordered by instance id regardless of threads."""
    settings = config.solver_settings()
    seeds = config.instance_seeds()
    t0 = time.perf_counter()
    if config.threads == 1:
        records = [_run_instance(config, settings, i, s) for i, s in enumerate(seeds)]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            futures = [pool.submit(_run_instance, config, settings, i, s)
                       for i, s in enumerate(seeds)]
            records = [f.result() for f in futures]
    result = BenchmarkResult(config, records, time.perf_counter() - t0)
    if config.out:
        emit_report(result, config.out)
    return result


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(result: BenchmarkResult, out) -> tuple:
    """Write ``<out>.csv`` and ``<out>.json``; returns both paths."""
    if not result.records:
        raise ValueError("no records to report")
    out = Path(out)
    base = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in result.records:
                w.writerow([_fmt(v) for v in r.row()])
        with open(json_path, "w") as fh:
            json.dump(result.summary(), fh, indent=2)
    except OSError as exc:
        raise OSError(f"cannot write report to {base}: {exc}") from exc
    return csv_path, json_path


def strip_timing(csv_text: str) -> str:
    """CSV text with the timing columns removed, for reproducibility comparisons."""
    rows = list(csv.reader(csv_text.splitlines()))
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    return "\n".join(",".join(row[i] for i in keep) for row in rows)


def _coerce(name, text):
    f = _SETTINGS_FIELDS[name]
    default = f.default
    if name == "eq_mode":
        text = text.strip()
        if ":" in text or "," in text:  # c:ipm, s:projection
            return dict(item.split(":") for item in text.replace(" ", "").split(","))
        return text
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if default is None or isinstance(default, float):
        return None if text.strip().lower() == "none" else float(text)
    return text


def _param(text):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def load_config(path, overrides: Optional[dict] = None) -> list:
    """Parse an INI file with one section per suite into ``BenchmarkConfig`` objects.

    Recognized keys: ``problem``, ``instances``, ``seed``, ``min_solved``, ``out``,
    ``threads``, any ``SolverSettings`` field, and ``param.<name>`` for problem
    parameters. ``overrides`` (seed, threads, out, eq_mode, abs_tol) take precedence.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str  # problem parameters are case sensitive (N, dt)
    if not cp.read(path):
        raise FileNotFoundError(path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    configs = []
    for section in cp.sections():
        sec = cp[section]
        kw = {"name": section, "settings": {}, "params": {}}
        for key, val in sec.items():
            if key == "problem":
                kw["problem"] = val.strip()
            elif key in ("instances", "seed", "min_solved", "threads"):
                kw[key] = int(val)
            elif key == "out":
                kw["out"] = val.strip()
            elif key.startswith("param."):
                kw["params"][key[len("param."):]] = _param(val)
            elif key in _SETTINGS_FIELDS:
                kw["settings"][key] = _coerce(key, val)
            else:
                raise ValueError(f"[{section}] unknown key {key!r}")
        if "problem" not in kw:
            raise ValueError(f"[{section}] missing 'problem'")
        for key in ("seed", "threads"):
            if key in overrides:
                kw[key] = overrides[key]
        if "eq_mode" in overrides:
            kw["eq_mode"] = overrides["eq_mode"]
        if "abs_tol" in overrides:
            kw["settings"]["abs_tol"] = overrides["abs_tol"]
        if "out" in overrides:
            kw["out"] = str(Path(overrides["out"]) / section)
        configs.append(BenchmarkConfig(**kw))
    if not configs:
        raise ValueError(f"{path}: no suites defined")
    return configs
