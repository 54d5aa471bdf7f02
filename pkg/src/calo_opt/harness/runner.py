"""Replica runs and their aggregation into mean and spread per iteration."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..optloop import EvolutionRecord, csv_header, run_study
from .config import StudyConfig

log = logging.getLogger(__name__)

QUANTITIES = ("objective", "surrogate_pred", "scint_sum", "abs_sum")


class StudyFailure(RuntimeError):
    """Too few replicas survived to aggregate."""


@dataclass
class AggregateTrace:
    iterations: np.ndarray
    n_features: int
    runs: int
    mean: dict[str, np.ndarray] = field(default_factory=dict)
    std: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return [f"theta_{j + 1}" for j in range(self.n_features)] + list(QUANTITIES)

    def final(self, name: str) -> float:
        return float(self.mean[name][-1])


def aggregate(records: list[EvolutionRecord]) -> AggregateTrace:
    """Mean and population standard deviation over the given records.

    Records are truncated to the shortest one; aborted iterations (NaN
    objective) are skipped per column.
    """
    if not records:
        raise StudyFailure("no records to aggregate")
    n = min(len(r) for r in records)
    f = records[0].n_features
    trace = AggregateTrace(np.arange(n), f, len(records))
    for name in trace.columns:
        if name.startswith("theta_"):
            j = int(name.split("_")[1]) - 1
            values = np.array([r.thetas[:n, j] for r in records])
        else:
            values = np.array([r.column(name)[:n] for r in records])
        with warnings.catch_warnings():
            # all-NaN columns (the initial objective) are expected
            warnings.simplefilter("ignore", category=RuntimeWarning)
            trace.mean[name] = np.nanmean(values, axis=0)
            trace.std[name] = np.nanstd(values, axis=0)
    return trace


@dataclass
class ReplicaResult:
    config: StudyConfig
    records: list[EvolutionRecord]
    aggregate: AggregateTrace
    warnings: list[str] = field(default_factory=list)

    @property
    def survivors(self) -> list[EvolutionRecord]:
        return [r for r in self.records if r.failure is None]


def run_replicas(config: StudyConfig, out_dir: str | Path | None = None) -> ReplicaResult:
    """Run ``config.runs`` replicas with seeds ``seed + r`` and aggregate the survivors.

    With ``out_dir``, every row is appended to ``evolution.csv`` as it is produced.
    """
    csv_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        csv_path = Path(out_dir) / "evolution.csv"
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(csv_header(config.n_features))
    records = []
    for run in range(config.runs):
        loop = config.loop_config(run)
        log.info("run %d/%d seed %d", run + 1, config.runs, loop.seed)
        records.append(run_study(loop, run=run, csv_path=csv_path, header=False))
    survivors = [r for r in records if r.failure is None]
    notes = [f"run {r.run} failed: {r.failure}" for r in records if r.failure is not None]
    if config.runs > 1 and len(survivors) < 2:
        raise StudyFailure(f"only {len(survivors)} of {config.runs} runs completed; " + "; ".join(notes))
    if not survivors:
        raise StudyFailure("; ".join(notes))
    if notes:
        notes.append(f"aggregate computed over {len(survivors)} of {config.runs} runs")
        for n in notes:
            log.warning(n)
    return ReplicaResult(config, records, aggregate(survivors), notes)
