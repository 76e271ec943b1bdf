"""Entropy-vs-accuracy binning and the attention-weight tail histogram."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import EpisodeRecord
from .objective import extract_cls_to_patch
from .vit import VisionTransformer


@dataclass
class BinnedCurve:
    lo: np.ndarray        # smallest entropy in each bin
    hi: np.ndarray        # largest entropy in each bin
    counts: np.ndarray
    accuracy: np.ndarray  # percent

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "entropy_lo", "entropy_hi", "count", "accuracy"])
            for i in range(self.num_bins):
                w.writerow([i, repr(float(self.lo[i])), repr(float(self.hi[i])),
                            int(self.counts[i]), repr(float(self.accuracy[i]))])


def binned_curve(entropy: Sequence[float], correct: Sequence[bool], num_bins: int = 20) -> BinnedCurve:
    """Sort by entropy and cut into equal-frequency bins (sizes differ by <= 1)."""
    e = np.asarray(entropy, dtype=np.float64)
    c = np.asarray(correct, dtype=np.float64)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if num_bins > len(e):
        raise ValueError(f"num_bins={num_bins} exceeds number of records {len(e)}")
    order = np.argsort(e, kind="stable")
    parts = np.array_split(order, num_bins)
    lo = np.array([e[p].min() for p in parts])
    hi = np.array([e[p].max() for p in parts])
    counts = np.array([len(p) for p in parts])
    acc = np.array([100.0 * c[p].mean() for p in parts])
    return BinnedCurve(lo, hi, counts, acc)


def entropy_accuracy_curve(records: Sequence[EpisodeRecord], num_bins: int = 20,
                           source: str = "before") -> BinnedCurve:
    """``source='before'`` pairs the pre-adaptation loss with the no-adapt prediction;
    ``'after'`` pairs the post-adaptation loss with the adapted prediction."""
    if source == "before":
        ent = [r.loss_before for r in records]
        ok = [r.baseline_correct for r in records]
    elif source == "after":
        ent = [r.loss_after for r in records]
        ok = [r.correct for r in records]
    else:
        raise ValueError("source must be 'before' or 'after'")
    return binned_curve(ent, ok, num_bins)


@dataclass
class TailHistogram:
    edges: np.ndarray   # len(counts) + 1; edges[0] = 0 catches everything below min weight
    counts: np.ndarray
    fraction: float
    num_samples: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["weight_lo", "weight_hi", "count", "frequency"])
            tot = max(self.total, 1)
            for i, n in enumerate(self.counts):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            int(n), repr(float(n) / tot)])


def log_edges(min_weight: float = 1e-6, bins_per_decade: int = 4) -> np.ndarray:
    decades = math.ceil(-math.log10(min_weight) - 1e-12)
    top = np.logspace(math.log10(min_weight), 0.0, decades * bins_per_decade + 1)
    return np.concatenate([[0.0], top])


def tail_histogram(weights: np.ndarray, min_weight: float = 1e-6, bins_per_decade: int = 4,
                   fraction: float = 1.0, num_samples: int = 1) -> TailHistogram:
    """Bucket weights in [0, 1]; every entry lands in exactly one bucket."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    edges = log_edges(min_weight, bins_per_decade)
    idx = np.searchsorted(edges, w, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)  # w == 1.0 goes to the top bucket
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return TailHistogram(edges, counts, fraction, num_samples)


def attention_tail_histogram(model: VisionTransformer, stream: Sequence, sample_fraction: float = 0.1,
                             seed: int = 0, min_weight: float = 1e-6, bins_per_decade: int = 4,
                             layer: int = -1, batch_size: int = 256) -> TailHistogram:
    """Histogram of renormalized CLS-to-patch weights over a random subset of ``stream``."""
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must lie in (0, 1]")
    n = len(stream)
    k = max(1, math.ceil(sample_fraction * n)) if n else 0
    pick = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    chunks = []
    t_r = model.config.num_special
    for s in range(0, k, batch_size):
        x = np.stack([stream[i].image for i in pick[s:s + batch_size]])
        att = model.run(x).attentions[layer].values
        chunks.append(extract_cls_to_patch(att, t_r).probs.ravel())
    w = np.concatenate(chunks) if chunks else np.zeros(0)
    return tail_histogram(w, min_weight, bins_per_decade, sample_fraction, k)
