"""Multi-seed robustness experiment: train, search, evaluate, severity sweep."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import harness
from .analysis import attention_tail_histogram
from .config import ExperimentConfig

log = logging.getLogger(__name__)

FAMILIES = ("adam/never", "adam/per-sample", "sgd")


def seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Shift every seed in ``cfg`` by ``seed`` so runs are independent replicates."""
    return dataclasses.replace(
        cfg, model_seed=cfg.model_seed + seed, data_seed=cfg.data_seed + 100 * seed,
        test_seed=cfg.test_seed + 100 * seed, train_seed=cfg.train_seed + seed,
        corruption_seed=cfg.corruption_seed + seed, order_seed=cfg.order_seed + seed)


@dataclass
class SeedResult:
    seed: int
    heldout_accuracy: float
    search_best: dict            # family -> policy description
    search_mca: dict             # family -> search-split mCA
    reports: dict                # family -> EvaluationReport as dict
    severity: dict               # corruption -> {severity: no-adapt accuracy}
    tail_counts: list            # attention-tail histogram on clean search data
    tail_edges: list
    seconds: float


@dataclass
class RobustnessSummary:
    seeds: list[int]
    per_seed: list[SeedResult] = field(default_factory=list)

    def mean(self, family: str, key: str) -> float:
        return float(np.mean([r.reports[family][key] for r in self.per_seed]))

    def mean_severity(self) -> dict[str, dict[int, float]]:
        names = self.per_seed[0].severity
        return {n: {s: float(np.mean([r.severity[n][s] for r in self.per_seed]))
                    for s in names[n]} for n in names}

    def to_json(self) -> str:
        out = {"seeds": self.seeds, "per_seed": [dataclasses.asdict(r) for r in self.per_seed],
               "mean": {f: {k: self.mean(f, k) for k in
                            ("mca", "mca_baseline", "clean_accuracy", "clean_accuracy_baseline")}
                        for f in self.per_seed[0].reports},
               "severity_mean": self.mean_severity(),
               "reference": harness.REFERENCE_RESULTS}
        return json.dumps(out, indent=2)


def run_seed(cfg: ExperimentConfig, seed: int, families: Sequence[str] = FAMILIES) -> SeedResult:
    t0 = time.perf_counter()
    cfg = seeded(cfg, seed)
    train_set, test = harness.build_data(cfg)
    heldout = harness.clean_stream(cfg, test, "eval")
    model, tlog = harness.train(cfg, train_set, heldout)
    log.info("seed %d: held-out accuracy %.2f", seed, tlog.heldout_accuracy)

    grid = [p for p in harness.default_grid(cfg) if harness.family(p) in families]
    search = harness.hyperparameter_search(model, harness.corruption_streams(cfg, test, "search"),
                                           grid, cfg.carry_across_corruptions)
    streams = harness.corruption_streams(cfg, test, "eval")
    reports = {}
    for fam, pol in search.best.items():
        report, _ = harness.evaluate(model, pol, streams, heldout, cfg.carry_across_corruptions,
                                     seeds={"offset": seed}, severities=cfg.severities)
        reports[fam] = dataclasses.asdict(report)
        log.info("seed %d %s: mCA %.2f (no-adapt %.2f), clean %.2f (no-adapt %.2f)", seed, fam,
                 report.mca, report.mca_baseline, report.clean_accuracy,
                 report.clean_accuracy_baseline)
    sweep = harness.severity_sweep(model, test, cfg.corruptions, cfg.severities,
                                   cfg.corruption_seed, "eval")
    tail = attention_tail_histogram(model, harness.clean_stream(cfg, test, "search"),
                                    cfg.tail_fraction, cfg.order_seed, cfg.tail_min_weight,
                                    cfg.tail_bins_per_decade, cfg.layer)
    return SeedResult(seed, tlog.heldout_accuracy, {k: p.describe() for k, p in search.best.items()},
                      search.best_mca, reports, sweep, tail.counts.tolist(), tail.edges.tolist(),
                      time.perf_counter() - t0)


def run_robustness(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2),
                   families: Sequence[str] = FAMILIES,
                   out_dir: str | Path | None = None) -> RobustnessSummary:
    summary = RobustnessSummary(list(seeds))
    for s in seeds:
        summary.per_seed.append(run_seed(cfg, s, families))
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "robustness.json").write_text(summary.to_json())
    return summary


def severity_inversions(curve: dict[int, float]) -> list[float]:
    """Size (in points) of every increase in accuracy between consecutive severities."""
    sev = sorted(curve)
    return [curve[b] - curve[a] for a, b in zip(sev, sev[1:]) if curve[b] > curve[a]]
