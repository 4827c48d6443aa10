"""Attention kernels: RoPE, windowed temporal attention (SETA), spatial
self-attention and frame-aligned cross-attention, plus their layer wrappers.

Hidden states use the story layout (batch, frames, channels, height, width).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor

_CAPTURE: list | None = None


@contextlib.contextmanager
def capture_attention():
    """Collect (name, weights) pairs from every attention kernel run inside."""
    global _CAPTURE
    prev = _CAPTURE
    _CAPTURE = records = []
    try:
        yield records
    finally:
        _CAPTURE = prev


def _record(name: str, weights: Tensor) -> None:
    if _CAPTURE is not None:
        _CAPTURE.append((name, weights.data.copy()))


# ---- rotary embedding ------------------------------------------------------
def rope_frequencies(dim: int, base: float = 10000.0) -> np.ndarray:
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def rope_rotate(x: Tensor, positions, axis: int = -2, base: float = 10000.0) -> Tensor:
    """Rotate interleaved channel pairs of ``x`` by position-dependent angles.

    ``positions`` runs along ``axis``; the last axis holds the features.
    """
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope needs an even feature dimension, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise ValueError("position axis cannot be the feature axis")
    if positions.shape != (x.shape[axis],):
        raise ShapeError(f"rope: {positions.shape[0]} positions for axis of length {x.shape[axis]}")
    ang = positions[:, None] * rope_frequencies(dim, base)[None, :]
    bshape = [1] * x.ndim
    bshape[axis] = len(positions)
    bshape[-1] = dim // 2
    cos = np.cos(ang).reshape(bshape).astype(x.dtype)
    sin = np.sin(ang).reshape(bshape).astype(x.dtype)

    def rotate(d, sign):
        even, odd = d[..., 0::2], d[..., 1::2]
        out = np.empty_like(d)
        out[..., 0::2] = even * cos - sign * odd * sin
        out[..., 1::2] = sign * even * sin + odd * cos
        return out

    return T._make(rotate(x.data, 1.0), (x,), lambda g: (rotate(g, -1.0),), "rope")


# ---- local window gather ---------------------------------------------------
@dataclass(frozen=True)
class WindowGather:
    """Index maps for the key/value set of windowed temporal attention.

    For a query at site p in frame i the keys are the query itself followed
    by the k x k neighbourhood of p (clamped to the grid) in every frame j != i.
    """

    n: int
    h: int
    w: int
    k: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {self.k}")
        if min(self.n, self.h, self.w) < 1:
            raise ValueError("frames and spatial extents must be positive")

    @property
    def n_lw(self) -> int:
        return (self.n - 1) * self.k * self.k + 1

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(h*w, k*k) flat source sites, replicate-clamped at the border."""
        r = self.k // 2
        ys = T.clamp_indices(self.h, r, r)
        xs = T.clamp_indices(self.w, r, r)
        dy = np.arange(self.k)
        yy = ys[np.arange(self.h)[:, None] + dy[None, :]]  # h, k
        xx = xs[np.arange(self.w)[:, None] + dy[None, :]]  # w, k
        flat = yy[:, None, :, None] * self.w + xx[None, :, None, :]  # h, w, k, k
        return flat.reshape(self.h * self.w, self.k * self.k)

    @cached_property
    def slots(self) -> tuple[np.ndarray, np.ndarray]:
        """(frame, window slot) of every key, each shaped (n, n_lw)."""
        kk = self.k * self.k
        center = kk // 2
        frames = np.empty((self.n, self.n_lw), dtype=np.intp)
        slot = np.empty((self.n, self.n_lw), dtype=np.intp)
        for i in range(self.n):
            others = [j for j in range(self.n) if j != i]
            frames[i] = [i] + [j for j in others for _ in range(kk)]
            slot[i] = [center] + list(range(kk)) * len(others)
        return frames, slot

    @cached_property
    def index(self) -> np.ndarray:
        """(h*w, n, n_lw) indices into the flattened (site, frame) axis."""
        frames, slot = self.slots
        src_site = self.neighbors[:, slot]  # hw, n, n_lw
        return src_site * self.n + frames[None]

    @cached_property
    def key_positions(self) -> np.ndarray:
        """Temporal position of each key: the frame it was read from."""
        return self.slots[0]


@lru_cache(maxsize=64)
def window_gather(n: int, h: int, w: int, k: int) -> WindowGather:
    return WindowGather(n, h, w, k)


def local_window_gather(z: Tensor, k: int, h: int, w: int) -> Tensor:
    """Gather window keys for z laid out as (..., h*w, n, c) -> (..., h*w, n, n_lw, c)."""
    hw, n, c = z.shape[-3:]
    if hw != h * w:
        raise ShapeError(f"window gather: {hw} sites do not match {h}x{w}")
    g = window_gather(n, h, w, k)
    flat = T.reshape(z, z.shape[:-3] + (hw * n, c))
    return T.take(flat, g.index, axis=-2)


# ---- attention kernels -----------------------------------------------------
def _split_heads(x: Tensor, heads: int) -> Tensor:
    c = x.shape[-1]
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    return T.reshape(x, x.shape[:-1] + (heads, c // heads))


def _as_story(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 4:
        return T.reshape(z, (1,) + z.shape), True
    if z.ndim != 5:
        raise ShapeError(f"expected (batch, frames, c, h, w) hidden state, got {z.shape}")
    return z, False


def seta_attention(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, bo: Tensor | None = None,
                   heads: int = 4, k: int = 3, rope: bool = True, name: str = "seta") -> Tensor:
    """Spatially-enhanced temporal attention over z (batch, n, c, h, w).

    Returns the projected attention output (no residual).
    """
    z, squeeze = _as_story(z)
    b, n, c, h, w = z.shape
    hw = h * w
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    dh = c // heads
    x = T.transpose(T.reshape(z, (b, n, c, hw)), (0, 3, 1, 2))  # b, hw, n, c
    q = _split_heads(x @ wq, heads)  # b, hw, n, H, dh
    key = _split_heads(x @ wk, heads)
    val = _split_heads(x @ wv, heads)
    if rope:
        # every key is rotated by the index of the frame it comes from
        pos = np.arange(n)
        q = rope_rotate(q, pos, axis=2)
        key = rope_rotate(key, pos, axis=2)
    gather = window_gather(n, h, w, k)
    # heads first, so the gathered windows come out ready for batched matmul
    key = T.reshape(T.transpose(key, (0, 3, 1, 2, 4)), (b, heads, hw * n, dh))
    val = T.reshape(T.transpose(val, (0, 3, 1, 2, 4)), (b, heads, hw * n, dh))
    key = T.take(key, gather.index, axis=2)  # b, H, hw, n, n_lw, dh
    val = T.take(val, gather.index, axis=2)
    q = T.reshape(T.transpose(q, (0, 3, 1, 2, 4)), (b, heads, hw, n, 1, dh))
    scores = (q @ T.swapaxes(key, -1, -2)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)  # b, H, hw, n, 1, n_lw
    _record(name, T.transpose(attn, (0, 2, 3, 1, 4, 5)))
    out = T.transpose(T.reshape(attn @ val, (b, heads, hw, n, dh)), (0, 2, 3, 1, 4))
    out = T.reshape(out, (b, hw, n, c)) @ wo
    if bo is not None:
        out = out + bo
    out = T.reshape(T.transpose(out, (0, 2, 3, 1)), (b, n, c, h, w))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def vanilla_temporal_attention(z: Tensor, wq, wk, wv, wo, bo=None, heads: int = 4, rope: bool = True,
                               name: str = "temporal") -> Tensor:
    """Per-site attention across frames: the k = 1 window."""
    return seta_attention(z, wq, wk, wv, wo, bo, heads=heads, k=1, rope=rope, name=name)


def multihead_attention(x: Tensor, ctx: Tensor, wq, wk, wv, wo, bo=None, heads: int = 4,
                        mask: np.ndarray | None = None, positions=None, name: str = "attn") -> Tensor:
    """Scaled dot-product attention of tokens x (..., Lq, c) over ctx (..., Lk, d).

    ``positions`` (length Lq == Lk) turns on RoPE for queries and keys.
    ``mask`` is a boolean (Lq, Lk) keep-mask.
    """
    q = _split_heads(x @ wq, heads)
    key = _split_heads(ctx @ wk, heads)
    val = _split_heads(ctx @ wv, heads)
    nd = q.ndim
    if positions is not None:
        q = rope_rotate(q, positions, axis=nd - 3)
        key = rope_rotate(key, positions, axis=nd - 3)
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)  # ..., H, L, dh
    q, key, val = T.transpose(q, perm), T.transpose(key, perm), T.transpose(val, perm)
    dh = q.shape[-1]
    scores = (q @ T.swapaxes(key, -1, -2)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1, mask=mask)
    _record(name, attn)
    out = T.transpose(attn @ val, perm)
    out = T.reshape(out, out.shape[:-2] + (-1,)) @ wo
    if bo is not None:
        out = out + bo
    return out


def _tokens(z: Tensor) -> Tensor:
    b, n, c, h, w = z.shape
    return T.transpose(T.reshape(z, (b, n, c, h * w)), (0, 1, 3, 2))  # b, n, hw, c


def _untokens(x: Tensor, shape) -> Tensor:
    b, n, c, h, w = shape
    return T.reshape(T.transpose(x, (0, 1, 3, 2)), (b, n, c, h, w))


def spatial_self_attention(z: Tensor, wq, wk, wv, wo, bo=None, heads: int = 4, name: str = "spatial") -> Tensor:
    """Self-attention over the h*w sites of each frame independently."""
    z, squeeze = _as_story(z)
    x = _tokens(z)
    out = _untokens(multihead_attention(x, x, wq, wk, wv, wo, bo, heads, name=name), z.shape)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def temporally_aligned_cross_attention(z: Tensor, ctx: Tensor, wq, wk, wv, wo, bo=None, heads: int = 4,
                                       name: str = "cross") -> Tensor:
    """Frame i of z attends only to the tokens of sentence i of ctx (batch, n, l, d)."""
    z, squeeze = _as_story(z)
    if ctx.ndim == 3:
        ctx = T.reshape(ctx, (1,) + ctx.shape)
    if ctx.shape[:2] != z.shape[:2]:
        raise ShapeError(f"cross-attention: {z.shape[1]} frames but context has {ctx.shape[1]} sentences "
                         f"(hidden {z.shape}, context {ctx.shape})")
    x = _tokens(z)
    out = _untokens(multihead_attention(x, ctx, wq, wk, wv, wo, bo, heads, name=name), z.shape)
    return T.reshape(out, out.shape[1:]) if squeeze else out


# ---- layers ----------------------------------------------------------------
class AttentionProjections(Module):
    def __init__(self, dim: int, ctx_dim: int | None = None, zero_out: bool = False):
        ctx_dim = ctx_dim or dim
        self.to_q = Linear(dim, dim, bias=False)
        self.to_k = Linear(ctx_dim, dim, bias=False)
        self.to_v = Linear(ctx_dim, dim, bias=False)
        self.to_out = Linear(dim, dim, zero=zero_out)

    @property
    def weights(self):
        return (self.to_q.weight, self.to_k.weight, self.to_v.weight, self.to_out.weight, self.to_out.bias)


class SETALayer(AttentionProjections):
    def __init__(self, dim: int, heads: int = 4, k: int = 3, rope: bool = True, zero_out: bool = True):
        super().__init__(dim, zero_out=zero_out)
        self.heads, self.k, self.rope = heads, k, rope

    def forward(self, z: Tensor) -> Tensor:
        return seta_attention(z, *self.weights, heads=self.heads, k=self.k, rope=self.rope)


def _story_layer_norm(norm: LayerNorm, z: Tensor) -> Tensor:
    # normalise each (frame, site) feature vector over channels
    perm = (0, 1, 3, 4, 2)
    y = norm(T.transpose(z, perm))
    return T.transpose(y, (0, 1, 4, 2, 3))


class SETABlock(Module):
    """Two windowed temporal self-attention layers and an FFN, each residual.

    All three branches end in zero-initialised projections, so the block is
    the identity when freshly initialised.
    """

    def __init__(self, dim: int, heads: int = 4, k: int = 3, rope: bool = True):
        self.norm1 = LayerNorm(dim)
        self.attn1 = SETALayer(dim, heads, k, rope)
        self.norm2 = LayerNorm(dim)
        self.attn2 = SETALayer(dim, heads, k, rope)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, zero_out=True)

    def forward(self, z: Tensor) -> Tensor:
        z = z + self.attn1(_story_layer_norm(self.norm1, z))
        z = z + self.attn2(_story_layer_norm(self.norm2, z))
        h = self.ff(T.transpose(_story_layer_norm(self.norm3, z), (0, 1, 3, 4, 2)))
        return z + T.transpose(h, (0, 1, 4, 2, 3))


class SpatialTransformer(Module):
    """Per-frame self-attention, frame-aligned cross-attention to the storyline, FFN.

    Each residual branch ends in a zero-initialised projection.
    """

    def __init__(self, dim: int, ctx_dim: int, heads: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn1 = AttentionProjections(dim, zero_out=True)
        self.norm2 = LayerNorm(dim)
        self.attn2 = AttentionProjections(dim, ctx_dim, zero_out=True)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, zero_out=True)
        self.heads = heads

    def forward(self, z: Tensor, ctx: Tensor) -> Tensor:
        shape = z.shape
        x = _tokens(z)
        if ctx.shape[:2] != shape[:2]:
            raise ShapeError(f"cross-attention: hidden {shape} and context {ctx.shape} disagree on frames")
        h = self.norm1(x)
        x = x + multihead_attention(h, h, *self.attn1.weights, heads=self.heads, name="spatial")
        x = x + multihead_attention(self.norm2(x), ctx, *self.attn2.weights, heads=self.heads, name="cross")
        x = x + self.ff(self.norm3(x))
        return _untokens(x, shape)
