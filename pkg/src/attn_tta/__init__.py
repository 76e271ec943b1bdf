"""Attention-entropy test-time adaptation for a small from-scratch vision transformer."""

from .autodiff import DiffTensor, GraphError, ShapeError, backward
from .engine import AdaptationPolicy, EpisodeRecord, TTAEngine, adapt_and_predict, run_stream
from .objective import (DegenerateAttentionError, attention_entropy, entropy_loss,
                        extract_cls_to_patch, pooled_entropy_loss)
from .optim import OptimizerConfig, OptimizerState, adam_step, sgd_step
from .snapshot import ParameterSnapshot
from .vit import AttentionTensor, Prediction, VisionTransformer, VitConfig, init_model

__version__ = "0.1.0"
