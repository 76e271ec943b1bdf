"""Episodic test-time adaptation: adapt on one sample, predict, reset.

Per episode: forward (capture attention) -> entropy loss -> backward ->
optimizer step(s) -> second forward for the prediction -> restore weights.
The optimizer state is either carried to the next episode or reset.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .objective import DegenerateAttentionError, attention_entropy
from .optim import OptimizerConfig, OptimizerState, optimizer_step
from .snapshot import ParameterSnapshot
from .vit import VisionTransformer, argmax_lowest

RESET_MODES = ("per-sample", "never")
PARAM_FILTERS = ("all", "attention-only", "layernorm-only")


@dataclass
class AdaptationPolicy:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    reset_model_params: bool = True
    reset_optimizer_state: str = "never"
    steps_per_sample: int = 1
    param_filter: str = "all"
    layer: int = -1
    pooled: bool = False

    def __post_init__(self):
        if self.reset_optimizer_state not in RESET_MODES:
            raise ValueError(f"reset_optimizer_state must be one of {RESET_MODES}")
        if self.param_filter not in PARAM_FILTERS:
            raise ValueError(f"param_filter must be one of {PARAM_FILTERS}")
        if self.steps_per_sample < 1:
            raise ValueError("steps_per_sample must be >= 1")

    def describe(self) -> dict:
        return asdict(self)


def select_params(names: Iterable[str], how: str) -> list[str]:
    names = list(names)
    if how == "all":
        return names
    if how == "attention-only":
        return [n for n in names if ".attn." in n]
    if how == "layernorm-only":
        return [n for n in names if ".norm" in n or n.startswith("norm.")]
    raise ValueError(f"unknown parameter filter {how!r}")


@dataclass
class EpisodeRecord:
    sample_id: int
    label: int | None
    predicted: int
    baseline_predicted: int
    loss_before: float
    loss_after: float
    entropies_before: list[float]
    entropies_after: list[float]
    wall_time: float
    failed: bool = False
    error: str | None = None
    corruption: str | None = None
    severity: int | None = None

    @property
    def correct(self) -> bool:
        return self.label is not None and self.predicted == self.label

    @property
    def baseline_correct(self) -> bool:
        return self.label is not None and self.baseline_predicted == self.label

    def outcome(self) -> tuple:
        """Everything except wall time, for exact comparisons."""
        d = asdict(self)
        d.pop("wall_time")
        return tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items())

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "EpisodeRecord":
        return cls(**json.loads(line))


class TTAEngine:
    """Holds the stream-start snapshot and the (possibly carried) optimizer state."""

    def __init__(self, model: VisionTransformer, policy: AdaptationPolicy,
                 state: OptimizerState | None = None, snapshot: ParameterSnapshot | None = None):
        self.model = model
        self.policy = policy
        self.state = state if state is not None else OptimizerState.fresh(policy.optimizer)
        self.snapshot = snapshot if snapshot is not None else model.snapshot()
        self.adapted = select_params(model.param_names, policy.param_filter)
        self.t_r = model.config.num_special

    def _loss(self, image):
        res = self.model.run(image)
        loss, ent = attention_entropy(res.attentions[self.policy.layer], self.t_r,
                                      pooled=self.policy.pooled)
        return res, loss, ent

    def episode(self, image, sample_id: int = 0, label: int | None = None,
                corruption: str | None = None, severity: int | None = None) -> EpisodeRecord:
        pol = self.policy
        model = self.model
        t0 = time.perf_counter()
        before_state = self.state.copy() if pol.reset_optimizer_state == "never" else None
        params = {n: model.params[n] for n in self.adapted}
        arrays = {n: p.values for n, p in params.items()}

        res, loss, ent = self._loss(image)
        baseline = int(argmax_lowest(res.logits.values[0]))
        loss_before = float(np.mean(ent.mean.values))
        ent_before = ent.per_head.values[0].tolist()
        error = None
        try:
            for step in range(pol.steps_per_sample):
                if step:
                    res, loss, ent = self._loss(image)
                if not np.isfinite(loss.values).all():
                    raise FloatingPointError("non-finite attention-entropy loss")
                grads = ad.backward(ad.tensor_sum(loss), params)
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise FloatingPointError("non-finite gradient")
                optimizer_step(self.state, arrays, grads)
            res, _, ent = self._loss(image)
            if not np.isfinite(res.logits.values).all():
                raise FloatingPointError("non-finite logits after adaptation")
        except (FloatingPointError, DegenerateAttentionError) as exc:
            error = f"{type(exc).__name__}: {exc}"

        if error is None:
            rec = EpisodeRecord(sample_id, label, int(argmax_lowest(res.logits.values[0])), baseline,
                                loss_before, float(np.mean(ent.mean.values)), ent_before,
                                ent.per_head.values[0].tolist(), 0.0, False, None,
                                corruption, severity)
        else:
            model.restore(self.snapshot)
            if before_state is not None:
                self.state = before_state
            rec = EpisodeRecord(sample_id, label, baseline, baseline, loss_before, loss_before,
                                ent_before, ent_before, 0.0, True, error, corruption, severity)

        if pol.reset_model_params:
            model.restore(self.snapshot)
        if pol.reset_optimizer_state == "per-sample":
            self.state = OptimizerState.fresh(pol.optimizer)
        rec.wall_time = time.perf_counter() - t0
        return rec

    def run(self, samples: Iterable) -> Iterator[EpisodeRecord]:
        """Process ``samples`` strictly in order, yielding one record each."""
        for s in samples:
            yield self.episode(s.image, s.sample_id, s.label,
                               getattr(s, "corruption", None), getattr(s, "severity", None))


def adapt_and_predict(model: VisionTransformer, snapshot: ParameterSnapshot, x,
                      policy: AdaptationPolicy, state: OptimizerState,
                      sample_id: int = 0, label: int | None = None
                      ) -> tuple[EpisodeRecord, OptimizerState]:
    eng = TTAEngine(model, policy, state, snapshot)
    rec = eng.episode(x, sample_id, label)
    return rec, eng.state


def run_stream(model: VisionTransformer, samples: Iterable, policy: AdaptationPolicy,
               state: OptimizerState | None = None) -> list[EpisodeRecord]:
    return list(TTAEngine(model, policy, state).run(samples))


def write_jsonl(records: Iterable[EpisodeRecord], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[EpisodeRecord]:
    with open(path) as fh:
        return [EpisodeRecord.from_json(line) for line in fh if line.strip()]
