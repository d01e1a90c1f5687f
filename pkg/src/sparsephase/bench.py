"""Monte-Carlo benchmark harness.

Trials are seeded by a stable 64-bit hash of (master seed, cell, trial), so
results are reproducible bit for bit on one platform regardless of thread
count, and the signal/noise stream is shared across algorithms so every
algorithm sees matched instances.  Timing is real wall time around the
solver call; pass include_timing=False (CLI: --repro) to zero the timing
columns when byte-identical output files are required.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import estimator as est
from .gauss_newton import GnConfig
from .gespar import GesparConfig, gespar
from .pred import PredConfig, pred, tse
from .signals import (
    PRIORS,
    UNIFORM,
    magnitudes,
    make_problem,
    recovery_metrics,
    sample_signal,
    ues,
)

ALGOS = ("pred", "pred-oracle", "gespar", "tse-oracle")

TRIAL_CSV_COLUMNS = [
    "algo", "n", "m", "k", "snr_db", "trial", "hit", "soft", "eta",
    "residual_l1", "objective", "wall_ms", "master_seed", "trial_seed", "error",
]
AGGREGATE_CSV_COLUMNS = [
    "algo", "n", "m", "k", "snr_db", "trials", "hit_rate", "soft_rate",
    "mean_eta", "mean_wall_ms",
]


def stable_seed(*parts) -> int:
    """64-bit seed from a SHA-256 hash of the canonicalized parts.

    Floats are canonicalized through repr (snr_db=inf becomes 'inf'), so the
    derivation is stable across runs and platforms.
    """
    canon = []
    for p in parts:
        if isinstance(p, float):
            canon.append("inf" if math.isinf(p) else repr(p))
        else:
            canon.append(str(p))
    digest = hashlib.sha256("\x1f".join(canon).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrialRecord:
    algo: str
    n: int
    m: int
    k: int
    snr_db: float
    trial: int
    hit: int
    soft: float
    eta: int
    residual_l1: float
    objective: float
    wall_ms: float
    master_seed: int
    trial_seed: int
    error: str = ""


def default_epsilon(y: np.ndarray, snr_db: float) -> float:
    """Residual threshold ||y|| * 10^(-SNR/20); zero in the noiseless case."""
    if math.isinf(snr_db):
        return 0.0
    return float(np.linalg.norm(y)) * 10.0 ** (-snr_db / 20.0)


def run_trial(
    algo: str,
    n: int,
    m: int,
    k: int,
    snr_db: float,
    prior: str,
    master_seed: int,
    trial: int,
    model: est.EstimatorModel | None = None,
    include_timing: bool = True,
) -> TrialRecord:
    """One benchmark trial with paper-default solver parameters.

    The instance stream excludes the algorithm from its seed so all
    algorithms see the same signal and noise for a given (cell, trial).
    Solver failures are recorded with an error tag instead of raising.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown algo {algo!r}; expected one of {ALGOS}")
    instance_seed = stable_seed(master_seed, "instance", n, m, k, snr_db, trial)
    algo_seed = stable_seed(master_seed, "algo", algo, n, m, k, snr_db, trial)
    inst_rng = np.random.default_rng(instance_seed)
    algo_rng = np.random.default_rng(algo_seed)

    signal = sample_signal(prior, n, k, inst_rng)
    problem = make_problem(signal, m, snr_db, inst_rng)
    eps = default_epsilon(problem.y, snr_db)
    gn = GnConfig(tau=1e-4, h=100)

    record = TrialRecord(
        algo=algo, n=n, m=m, k=k, snr_db=snr_db, trial=trial, hit=0, soft=0.0,
        eta=1, residual_l1=math.nan, objective=math.nan, wall_ms=0.0,
        master_seed=master_seed, trial_seed=instance_seed,
    )
    try:
        start = time.perf_counter()
        if algo == "gespar":
            result = gespar(problem, k, GesparConfig(kappa_iter=500, epsilon=eps, gn=gn), algo_rng)
            x, support, eta = result.x, result.support, result.stats.eta
        elif algo == "tse-oracle":
            alpha = np.asarray(sorted(ues(signal.support, n).alpha))
            x, support = tse(problem, k, alpha, gn, algo_rng)
            eta = 2
        else:
            if algo == "pred-oracle":
                estimator_fn = lambda y: est.oracle(signal.support, n)
            else:
                if model is None:
                    raise ValueError("algo 'pred' requires a trained model")
                estimator_fn = model.as_estimator()
            result = pred(problem, k, estimator_fn, PredConfig(kappa_iter=100, epsilon=eps, gn=gn), algo_rng)
            x, support, eta = result.x, result.support, result.stats.eta
        elapsed_ms = (time.perf_counter() - start) * 1e3

        v = magnitudes(x, m)
        hit, soft = recovery_metrics(support, signal.support, k)
        record.hit = hit
        record.soft = soft
        record.eta = eta
        record.residual_l1 = float(np.sum(np.abs(problem.y - v)))
        record.objective = float(np.sum((problem.y - v) ** 2))
        record.wall_ms = elapsed_ms if include_timing else 0.0
    except Exception as exc:  # failure becomes a tagged record, never a crash
        record.error = f"{type(exc).__name__}: {exc}"
    return record


@dataclass
class SweepConfig:
    algos: list
    n_values: list
    k_values: list
    snr_values: list
    trials: int = 100
    prior: str = UNIFORM
    model_path: str | None = None
    out_dir: str = "results"
    master_seed: int = 0
    m_offset: int = 1  # m = n + m_offset

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for algo in self.algos:
            if algo not in ALGOS:
                raise ValueError(f"unknown algo {algo!r}")
        if "pred" in self.algos and not self.model_path:
            raise ValueError("algo 'pred' requires model_path (or use pred-oracle)")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior {self.prior!r}")


def desk_sweep_config(**overrides) -> SweepConfig:
    """Laptop-scale sweep: completes in minutes."""
    base = dict(
        algos=["pred-oracle", "gespar", "tse-oracle"],
        n_values=[32, 64],
        k_values=list(range(2, 11)),
        snr_values=[30.0, math.inf],
        trials=100,
    )
    base.update(overrides)
    return SweepConfig(**base)


def paper_sweep_config(**overrides) -> SweepConfig:
    """Published-experiment grid (n up to 768, full-size network).  Recorded
    as a preset; far beyond the desk-scale targets this package tests."""
    base = dict(
        algos=["pred", "gespar"],
        n_values=[256, 512, 768],
        k_values=list(range(2, 21)),
        snr_values=[15.0, 30.0],
        trials=100,
    )
    base.update(overrides)
    return SweepConfig(**base)


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        return float(text)


def _parse_list(text: str) -> list:
    """Comma lists ('2, 4, 8') and inclusive ranges ('2:10')."""
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" in chunk:
            lo, hi = chunk.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(_parse_scalar(chunk))
    return out


def parse_sweep_config(text: str, **overrides) -> SweepConfig:
    """Flat key = value config; see README for the schema."""
    keys = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        keys[key.strip()] = value.strip()

    kwargs = {}
    if "algos" in keys:
        kwargs["algos"] = [a.strip() for a in keys["algos"].split(",") if a.strip()]
    if "n" in keys:
        kwargs["n_values"] = [int(v) for v in _parse_list(keys["n"])]
    if "k" in keys:
        kwargs["k_values"] = [int(v) for v in _parse_list(keys["k"])]
    if "snr" in keys:
        kwargs["snr_values"] = [float(v) for v in _parse_list(keys["snr"])]
    if "trials" in keys:
        kwargs["trials"] = int(keys["trials"])
    if "prior" in keys:
        kwargs["prior"] = keys["prior"]
    if "model" in keys:
        kwargs["model_path"] = keys["model"]
    if "out" in keys:
        kwargs["out_dir"] = keys["out"]
    if "seed" in keys:
        kwargs["master_seed"] = int(keys["seed"])
    if "m_offset" in keys:
        kwargs["m_offset"] = int(keys["m_offset"])
    unknown = set(keys) - {"algos", "n", "k", "snr", "trials", "prior", "model", "out", "seed", "m_offset"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(overrides)
    for name in ("algos", "n_values", "k_values", "snr_values"):
        if name not in kwargs:
            raise ValueError(f"config is missing required key for {name}")
    return SweepConfig(**kwargs)


def load_sweep_config(path, **overrides) -> SweepConfig:
    return parse_sweep_config(Path(path).read_text(), **overrides)


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def run_sweep(cfg: SweepConfig, threads: int = 1, include_timing: bool = True):
    """Run every (algo, n, k, snr) cell; returns (records, aggregates).

    Cells and trials execute independently (optionally in a thread pool);
    output ordering is fixed by the configuration, not the schedule.
    """
    model = est.load_model(cfg.model_path) if "pred" in cfg.algos else None
    tasks = []
    for algo in cfg.algos:
        for n in cfg.n_values:
            for k in cfg.k_values:
                for snr in cfg.snr_values:
                    for trial in range(cfg.trials):
                        tasks.append((algo, n, k, snr, trial))

    def run(task):
        algo, n, k, snr, trial = task
        return run_trial(
            algo, n, n + cfg.m_offset, k, snr, cfg.prior, cfg.master_seed, trial,
            model=model if algo == "pred" else None, include_timing=include_timing,
        )

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, tasks))
    else:
        records = [run(t) for t in tasks]

    order = {task: i for i, task in enumerate(tasks)}
    records.sort(key=lambda r: order[(r.algo, r.n, r.k, r.snr_db, r.trial)])

    aggregates = []
    for algo in cfg.algos:
        for n in cfg.n_values:
            for k in cfg.k_values:
                for snr in cfg.snr_values:
                    cell = [r for r in records
                            if (r.algo, r.n, r.k) == (algo, n, k) and r.snr_db == snr]
                    aggregates.append({
                        "algo": algo,
                        "n": n,
                        "m": n + cfg.m_offset,
                        "k": k,
                        "snr_db": snr,
                        "trials": len(cell),
                        "hit_rate": float(np.mean([r.hit for r in cell])),
                        "soft_rate": float(np.mean([r.soft for r in cell])),
                        "mean_eta": float(np.mean([r.eta for r in cell])),
                        "mean_wall_ms": float(np.mean([r.wall_ms for r in cell])),
                    })
    return records, aggregates


def write_sweep_outputs(cfg: SweepConfig, records, aggregates, out_dir=None) -> dict:
    """trials.csv, aggregate.csv (RFC-4180, header row), summary.json."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    trials_path = out / "trials.csv"
    with open(trials_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_CSV_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, col)) for col in TRIAL_CSV_COLUMNS])

    agg_path = out / "aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_CSV_COLUMNS)
        for row in aggregates:
            writer.writerow([_fmt(row[col]) for col in AGGREGATE_CSV_COLUMNS])

    summary = {
        "config": {
            "algos": cfg.algos,
            "n": cfg.n_values,
            "k": cfg.k_values,
            "snr_db": ["inf" if math.isinf(s) else s for s in cfg.snr_values],
            "trials": cfg.trials,
            "prior": cfg.prior,
            "model": cfg.model_path,
            "master_seed": cfg.master_seed,
            "m_offset": cfg.m_offset,
        },
        "aggregates": [
            {**row, "snr_db": "inf" if math.isinf(row["snr_db"]) else row["snr_db"]}
            for row in aggregates
        ],
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return {"trials": trials_path, "aggregate": agg_path, "summary": summary_path}
