"""CLS-to-patch attention entropy.

All functions accept attention with any leading batch dims, ``(..., H, T, T)``,
either as a ``DiffTensor`` (differentiable) or as a plain array /
``AttentionTensor`` (wrapped as a constant). Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .vit import AttentionTensor

CLS_INDEX = 0
MASS_FLOOR = 1e-12
LOG_FLOOR = 1e-12


class DegenerateAttentionError(ValueError):
    """CLS attention mass on patch tokens is (numerically) zero for some head."""


@dataclass
class ClsAttentionDistribution:
    rows: DiffTensor  # (..., H, P)

    @property
    def probs(self) -> np.ndarray:
        return self.rows.values

    @property
    def heads(self) -> int:
        return self.rows.shape[-2]

    @property
    def patches(self) -> int:
        return self.rows.shape[-1]


@dataclass
class HeadEntropies:
    per_head: DiffTensor  # (..., H)
    mean: DiffTensor      # (...,); a scalar loss root when unbatched

    @property
    def values(self) -> np.ndarray:
        return self.per_head.values

    @property
    def loss(self) -> float:
        return float(np.mean(self.mean.values))


def _as_tensor(att) -> DiffTensor:
    if isinstance(att, DiffTensor):
        return att
    if isinstance(att, AttentionTensor):
        return ad.constant(att.weights)
    return ad.constant(np.asarray(att, dtype=np.float64))


def extract_cls_to_patch(att, t_r: int) -> ClsAttentionDistribution:
    """Row ``CLS_INDEX`` of each head, special tokens dropped, L1-renormalized."""
    a = _as_tensor(att)
    if a.ndim < 3 or a.shape[-1] != a.shape[-2]:
        raise ad.ShapeError("extract_cls_to_patch", a.shape, detail="expected (..., H, T, T)")
    t = a.shape[-1]
    if not 1 <= t_r < t:
        raise ValueError(f"t_r must satisfy 1 <= t_r < T={t}, got {t_r}")
    patch = a[..., CLS_INDEX, t_r:]                      # (..., H, P)
    mass = ad.tensor_sum(patch, axis=-1, keepdims=True)  # (..., H, 1)
    low = mass.values < MASS_FLOOR
    if low.any():
        raise DegenerateAttentionError(
            f"CLS attention mass on patches below {MASS_FLOOR:g} for "
            f"{int(low.sum())} head(s); attention collapsed onto special tokens")
    return ClsAttentionDistribution(ad.div(patch, ad.broadcast_to(mass, patch.shape)))


def row_entropy(p: DiffTensor) -> DiffTensor:
    """-sum p log p over the last axis; entries <= 1e-12 contribute exactly 0."""
    keep = p.values > LOG_FLOOR
    plogp = ad.where(keep, ad.mul(p, ad.log(ad.clip_min(p, LOG_FLOOR))))
    return ad.scalar_mul(ad.tensor_sum(plogp, axis=-1), -1.0)


def entropy_loss(dist: ClsAttentionDistribution) -> HeadEntropies:
    per_head = row_entropy(dist.rows)
    return HeadEntropies(per_head, ad.tensor_mean(per_head, axis=-1))


def pooled_entropy_loss(dist: ClsAttentionDistribution) -> DiffTensor:
    """Entropy of the head-averaged distribution (ablation; not the default loss)."""
    pooled = ad.tensor_mean(dist.rows, axis=-2)
    return row_entropy(pooled)


def attention_entropy(att, t_r: int, pooled: bool = False) -> tuple[DiffTensor, HeadEntropies]:
    """Loss tensor plus per-head entropies for one attention tensor."""
    dist = extract_cls_to_patch(att, t_r)
    ent = entropy_loss(dist)
    loss = pooled_entropy_loss(dist) if pooled else ent.mean
    return loss, ent
