"""Desk-scale vision transformer built on ``autodiff``.

Token layout is fixed: index 0 is CLS, indices ``1 .. t_r-1`` are register
tokens, indices ``t_r .. T-1`` are image patches in row-major patch order.

Parameter names, in order::

    patch_embed.weight (C*p*p, D)   patch_embed.bias (D,)
    cls_token (D,)                  register_tokens (R, D)   [only if R > 0]
    pos_embed (N, D)                -- patches only
    blocks.{i}.norm1.weight/bias    blocks.{i}.attn.qkv.weight (D, 3D) / .bias
    blocks.{i}.attn.proj.weight/bias
    blocks.{i}.norm2.weight/bias    blocks.{i}.mlp.fc1.weight (D, M) / .bias
    blocks.{i}.mlp.fc2.weight/bias
    norm.weight/bias                head.weight (D, K) / head.bias
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .snapshot import ParameterSnapshot, restore_snapshot, take_snapshot


class ConfigError(ValueError):
    pass


@dataclass
class VitConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    num_register_tokens: int = 4
    num_classes: int = 10
    mlp_ratio: int = 4
    layernorm_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        for f in ("image_size", "patch_size", "channels", "embed_dim", "num_heads",
                  "num_layers", "num_classes", "mlp_ratio"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.num_register_tokens < 0:
            raise ConfigError("num_register_tokens must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.layernorm_eps <= 0:
            raise ConfigError("layernorm_eps must be > 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_special(self) -> int:
        """t_r: CLS plus registers."""
        return 1 + self.num_register_tokens

    @property
    def num_tokens(self) -> int:
        return self.num_special + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown VitConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class AttentionTensor:
    layer: int
    weights: np.ndarray  # (H, T, T), post-softmax

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    @property
    def tokens(self) -> int:
        return self.weights.shape[-1]


@dataclass
class Prediction:
    logits: np.ndarray
    predicted_class: int


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(logits, axis=-1)


@dataclass
class ForwardResult:
    logits: DiffTensor            # (B, K)
    attentions: list[DiffTensor]  # per layer, (B, H, T, T)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, S, S) -> (B, N, C*p*p), patches row-major, each flattened C-major."""
    b, c, s, _ = images.shape
    g = s // patch
    x = images.reshape(b, c, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch * patch)


class VisionTransformer:
    def __init__(self, config: VitConfig):
        config.validate()
        self.config = config
        self.params: dict[str, DiffTensor] = {}
        self._init_params(np.random.default_rng(config.seed))

    def _add(self, name, values):
        self.params[name] = ad.parameter(values, name)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, pdim = c.embed_dim, c.channels * c.patch_size ** 2
        m = d * c.mlp_ratio

        def w(fan_in, fan_out):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, std, size=(fan_in, fan_out))

        self._add("patch_embed.weight", w(pdim, d))
        self._add("patch_embed.bias", np.zeros(d))
        self._add("cls_token", rng.normal(0.0, 0.02, size=d))
        if c.num_register_tokens:
            self._add("register_tokens", rng.normal(0.0, 0.02, size=(c.num_register_tokens, d)))
        self._add("pos_embed", rng.normal(0.0, 0.02, size=(c.num_patches, d)))
        for i in range(c.num_layers):
            p = f"blocks.{i}."
            self._add(p + "norm1.weight", np.ones(d))
            self._add(p + "norm1.bias", np.zeros(d))
            self._add(p + "attn.qkv.weight", w(d, 3 * d))
            self._add(p + "attn.qkv.bias", np.zeros(3 * d))
            self._add(p + "attn.proj.weight", w(d, d))
            self._add(p + "attn.proj.bias", np.zeros(d))
            self._add(p + "norm2.weight", np.ones(d))
            self._add(p + "norm2.bias", np.zeros(d))
            self._add(p + "mlp.fc1.weight", w(d, m))
            self._add(p + "mlp.fc1.bias", np.zeros(m))
            self._add(p + "mlp.fc2.weight", w(m, d))
            self._add(p + "mlp.fc2.bias", np.zeros(d))
        self._add("norm.weight", np.ones(d))
        self._add("norm.bias", np.zeros(d))
        self._add("head.weight", w(d, c.num_classes))
        self._add("head.bias", np.zeros(c.num_classes))

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    # ------------------------------------------------------------ forward

    def _check_images(self, images) -> np.ndarray:
        c = self.config
        x = np.asarray(images, dtype=np.float64)
        single = (c.channels, c.image_size, c.image_size)
        if x.shape == single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != single:
            raise ad.ShapeError("forward", x.shape, single, detail="expected (C, S, S) or (B, C, S, S)")
        return x

    def _linear(self, x: DiffTensor, prefix: str) -> DiffTensor:
        w, b = self.params[prefix + ".weight"], self.params[prefix + ".bias"]
        y = ad.matmul(x, w)
        return ad.add(y, ad.broadcast_to(b, y.shape))

    def _ln(self, x: DiffTensor, prefix: str) -> DiffTensor:
        return ad.layernorm(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"],
                            self.config.layernorm_eps)

    def _attention(self, x: DiffTensor, prefix: str) -> tuple[DiffTensor, DiffTensor]:
        c = self.config
        b, t, d = x.shape
        h, dh = c.num_heads, c.head_dim
        qkv = self._linear(x, prefix + ".qkv")                      # (B, T, 3D)
        qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.scalar_mul(ad.matmul(q, ad.swap_last(k)), dh ** -0.5)
        att = ad.softmax_lastdim(scores)                            # (B, H, T, T)
        out = ad.matmul(att, v)                                     # (B, H, T, dh)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self._linear(out, prefix + ".proj"), att

    def run(self, images) -> ForwardResult:
        """Batched forward building a fresh graph; keeps every layer's attention."""
        c = self.config
        x = self._check_images(images)
        b = x.shape[0]
        d = c.embed_dim
        patches = ad.constant(patchify(x, c.patch_size))
        tok = self._linear(patches, "patch_embed")
        tok = ad.add(tok, ad.broadcast_to(self.params["pos_embed"], tok.shape))
        parts = [ad.broadcast_to(ad.reshape(self.params["cls_token"], (1, 1, d)), (b, 1, d))]
        if c.num_register_tokens:
            regs = ad.reshape(self.params["register_tokens"], (1, c.num_register_tokens, d))
            parts.append(ad.broadcast_to(regs, (b, c.num_register_tokens, d)))
        parts.append(tok)
        h = ad.concat(parts, axis=1)                                # (B, T, D)

        attentions = []
        for i in range(c.num_layers):
            p = f"blocks.{i}"
            a_out, att = self._attention(self._ln(h, p + ".norm1"), p + ".attn")
            attentions.append(att)
            h = ad.add(h, a_out)
            hid = ad.gelu(self._linear(self._ln(h, p + ".norm2"), p + ".mlp.fc1"))
            h = ad.add(h, self._linear(hid, p + ".mlp.fc2"))
        cls = self._ln(h, "norm")[:, 0, :]
        return ForwardResult(self._linear(cls, "head"), attentions)

    def forward(self, image, layer: int = -1) -> tuple[Prediction, AttentionTensor]:
        """Single image -> (prediction, post-softmax attention of ``layer``)."""
        x = np.asarray(image, dtype=np.float64)
        c = self.config
        if x.shape != (c.channels, c.image_size, c.image_size):
            raise ad.ShapeError("forward", x.shape, (c.channels, c.image_size, c.image_size))
        res = self.run(x)
        idx = self._layer_index(layer)
        logits = res.logits.values[0].copy()
        return (Prediction(logits, int(argmax_lowest(logits))),
                AttentionTensor(idx, res.attentions[idx].values[0].copy()))

    def _layer_index(self, layer: int) -> int:
        n = self.config.num_layers
        if not -n <= layer < n:
            raise IndexError(f"layer {layer} out of range for {n} layers")
        return layer % n

    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        """Argmax classes for a stack of images, no adaptation."""
        x = self._check_images(images)
        out = []
        for s in range(0, len(x), batch_size):
            out.append(argmax_lowest(self.run(x[s:s + batch_size]).logits.values))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    # ------------------------------------------------------------ state

    def snapshot(self) -> ParameterSnapshot:
        return take_snapshot(self.params)

    def restore(self, snap: ParameterSnapshot) -> None:
        restore_snapshot(self.params, snap)

    def save(self, path: str | Path) -> None:
        payload = {"config": asdict(self.config), "snapshot": self.snapshot().to_json_dict()}
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "VisionTransformer":
        payload = json.loads(Path(path).read_text())
        model = cls(VitConfig.from_dict(payload["config"]))
        model.restore(ParameterSnapshot.from_json_dict(payload["snapshot"]))
        return model


def init_model(config: VitConfig) -> VisionTransformer:
    return VisionTransformer(config)


def snapshot(model: VisionTransformer) -> ParameterSnapshot:
    return model.snapshot()


def restore(model: VisionTransformer, snap: ParameterSnapshot) -> None:
    model.restore(snap)
