"""Storyline Contextualizer: a small transformer over per-sentence embeddings.

Input and output are (batch, n sentences, l tokens, c_T). The module adds a
learned correction to its input; the correction is produced by the second
FFN of the last layer, whose output projection starts at zero, so a freshly
initialised contextualizer returns its input unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionProjections, multihead_attention
from .nn import FeedForward, LayerNorm, Module
from .tensor import ShapeError, Tensor

VARIANTS = ("full", "simplified", "dual", "causal")
_ALIASES = {"dual_self_attention": "dual"}


def normalize_variant(variant: str) -> str:
    variant = _ALIASES.get(variant, variant)
    if variant not in VARIANTS:
        raise ValueError(f"unknown contextualizer variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class ContextualizerConfig:
    dim: int = 32
    layers: int = 4
    variant: str = "full"
    heads: int = 4
    rope: bool = True

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.layers < 1:
            raise ValueError("contextualizer needs at least one layer")


class ContextualizerLayer(Module):
    def __init__(self, cfg: ContextualizerConfig, last: bool):
        dim = cfg.dim
        self.variant = cfg.variant
        self.heads = cfg.heads
        self.rope = cfg.rope
        self.last = last
        self.norm_attn = LayerNorm(dim)
        self.attn = AttentionProjections(dim)
        if cfg.variant == "dual":
            self.norm_attn2 = LayerNorm(dim)
            self.attn2 = AttentionProjections(dim)
        self.norm_ffn = LayerNorm(dim)
        if cfg.variant == "full":
            self.ffn = FeedForward(dim)
            self.norm_temporal = LayerNorm(dim)
            self.temporal = AttentionProjections(dim)
            self.norm_ffn2 = LayerNorm(dim)
            self.ffn2 = FeedForward(dim, zero_out=last)
        else:
            self.ffn = FeedForward(dim, zero_out=last)

    def _global_attn(self, proj, norm, x: Tensor) -> Tensor:
        b, n, l, c = x.shape
        flat = T.reshape(norm(x), (b, n * l, c))
        mask = np.tril(np.ones((n * l, n * l), dtype=bool)) if self.variant == "causal" else None
        out = multihead_attention(flat, flat, *proj.weights, heads=self.heads, mask=mask, name="sc.self")
        return T.reshape(out, (b, n, l, c))

    def _temporal_attn(self, x: Tensor) -> Tensor:
        b, n, l, c = x.shape
        h = T.transpose(self.norm_temporal(x), (0, 2, 1, 3))  # b, l, n, c
        pos = np.arange(n) if self.rope else None
        out = multihead_attention(h, h, *self.temporal.weights, heads=self.heads, positions=pos,
                                  name="sc.temporal")
        return T.transpose(out, (0, 2, 1, 3))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """Returns (stream, head). ``head`` is the last layer's correction."""
        x = x + self._global_attn(self.attn, self.norm_attn, x)
        if self.variant == "dual":
            x = x + self._global_attn(self.attn2, self.norm_attn2, x)
        if self.variant == "full":
            x = x + self.ffn(self.norm_ffn(x))
            x = x + self._temporal_attn(x)
            last_ffn, last_norm = self.ffn2, self.norm_ffn2
        else:
            last_ffn, last_norm = self.ffn, self.norm_ffn
        if self.last:
            return x, last_ffn(last_norm(x))
        return x + last_ffn(last_norm(x)), None


class StorylineContextualizer(Module):
    def __init__(self, cfg: ContextualizerConfig | None = None, **kwargs):
        self.cfg = cfg or ContextualizerConfig(**kwargs)
        n = self.cfg.layers
        self.layers = [ContextualizerLayer(self.cfg, last=(i == n - 1)) for i in range(n)]

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def forward(self, c: Tensor) -> Tensor:
        if c.ndim == 3:
            return T.reshape(self.forward(T.reshape(c, (1,) + c.shape)), c.shape)
        if c.ndim != 4 or c.shape[-1] != self.cfg.dim:
            raise ShapeError(f"contextualizer expects (batch, n, l, {self.cfg.dim}), got {c.shape}")
        x = c
        head = None
        for layer in self.layers:
            x, head = layer(x)
        return c + head


def contextualize(c: Tensor, model: StorylineContextualizer) -> Tensor:
    return model(c)


def contextualize_variant(c: Tensor, variant: str, layers: int = 4, heads: int = 4, seed: int = 0) -> Tensor:
    """Run a freshly initialised contextualizer of the given variant."""
    cfg = ContextualizerConfig(dim=c.shape[-1], layers=layers, variant=variant, heads=heads)
    return StorylineContextualizer(cfg).init_weights(seed)(c)
