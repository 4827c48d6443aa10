"""StoryFlow: scene-change magnitudes between adjacent frames and their embedding."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ShapeError, Tensor


def compute_storyflow(z0, norm: str = "l2") -> np.ndarray:
    """Distances between consecutive frame latents.

    ``z0`` is (..., n, c, h, w); returns (..., n - 1). ``norm="rms"`` divides
    the L2 distance by sqrt(c*h*w).
    """
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64)
    if z0.ndim < 4:
        raise ShapeError(f"storyflow expects (..., n, c, h, w) latents, got {z0.shape}")
    n = z0.shape[-4]
    if n < 2:
        raise ValueError(f"storyflow needs at least two frames, got {n}")
    diff = (z0[..., :-1, :, :, :] - z0[..., 1:, :, :, :]).reshape(z0.shape[:-4] + (n - 1, -1))
    d = np.sqrt((diff * diff).sum(axis=-1))
    if norm == "rms":
        d = d / np.sqrt(diff.shape[-1])
    elif norm != "l2":
        raise ValueError(f"unknown storyflow norm {norm!r}")
    return d


def sinusoidal_embedding(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """[cos | sin] code of each scalar in ``values``; output (..., dim)."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = values[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def interpolation_matrix(n_frames: int, scheme: str = "midpoint") -> np.ndarray:
    """(n, n - 1) linear map from per-transition rows to per-frame rows.

    midpoint: transition i sits on the boundary between frames i and i + 1
    (position i + 1 on [0, n]) and frame j is read at its centre j + 0.5,
    clamping at both ends. endpoint: the n - 1 transitions are spread evenly
    over the frame indices 0..n-1.
    """
    m = n_frames - 1
    if m < 1:
        raise ValueError("need at least one transition")
    if scheme == "midpoint":
        src = np.arange(1, m + 1, dtype=np.float64)
        dst = np.arange(n_frames, dtype=np.float64) + 0.5
    elif scheme == "endpoint":
        src = np.linspace(0.0, n_frames - 1.0, m) if m > 1 else np.zeros(1)
        dst = np.arange(n_frames, dtype=np.float64)
    else:
        raise ValueError(f"unknown interpolation scheme {scheme!r}")
    eye = np.eye(m)
    if m == 1:
        return np.ones((n_frames, 1))
    return np.stack([np.interp(dst, src, eye[i]) for i in range(m)], axis=1)


class StoryFlowAdapter(Module):
    """Sinusoidal code -> FFN (zero-initialised output) -> linear resampling to n frames."""

    def __init__(self, embed_dim: int, freq_dim: int = 32, scale: float = 1.0, interp: str = "midpoint"):
        self.fc1 = Linear(freq_dim, embed_dim)
        self.fc2 = Linear(embed_dim, embed_dim, zero=True)
        self.freq_dim = freq_dim
        self.scale = scale
        self.interp = interp

    def forward(self, deltas) -> Tensor:
        return self.embed(deltas)

    def embed(self, deltas, n_frames: int | None = None) -> Tensor:
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.ndim == 1:
            deltas = deltas[None]
        m = deltas.shape[-1]
        if m < 1:
            raise ValueError("storyflow embedding needs at least one delta")
        n = n_frames or m + 1
        code = T.Tensor(sinusoidal_embedding(deltas * self.scale, self.freq_dim))
        h = self.fc2(T.silu(self.fc1(code)))  # b, m, c
        return T.Tensor(interpolation_matrix(n, self.interp)) @ h


def embed_storyflow(adapter: StoryFlowAdapter, deltas) -> Tensor:
    return adapter.embed(deltas)


def inject(storyflow_embed: Tensor, timestep_embed: Tensor) -> Tensor:
    """Per-frame conditioning: timestep embedding (b, c) broadcast over frames plus (b, n, c)."""
    storyflow_embed = T.as_tensor(storyflow_embed)
    timestep_embed = T.as_tensor(timestep_embed)
    if timestep_embed.ndim == 1:
        timestep_embed = T.reshape(timestep_embed, (1,) + timestep_embed.shape)
    if storyflow_embed.ndim == 2:
        storyflow_embed = T.reshape(storyflow_embed, (1,) + storyflow_embed.shape)
    if storyflow_embed.shape[-1] != timestep_embed.shape[-1]:
        raise ShapeError(f"storyflow embedding width {storyflow_embed.shape[-1]} "
                         f"!= timestep embedding width {timestep_embed.shape[-1]}")
    b, _, c = storyflow_embed.shape
    return storyflow_embed + T.reshape(timestep_embed, (timestep_embed.shape[0], 1, c))


class StoryFlowStats:
    """Running per-transition mean (Welford) of training-set storyflows."""

    def __init__(self, length: int | None = None):
        self.count = 0
        self.mean = None if length is None else np.zeros(length)
        self.m2 = None if length is None else np.zeros(length)

    def update(self, deltas) -> None:
        deltas = np.asarray(deltas, dtype=np.float64)
        for row in deltas.reshape(-1, deltas.shape[-1]):
            if self.mean is None:
                self.mean = np.zeros_like(row)
                self.m2 = np.zeros_like(row)
            if row.shape != self.mean.shape:
                raise ShapeError(f"storyflow of length {row.size} does not match running length {self.mean.size}")
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.mean)

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self.m2 / (self.count - 1)

    def state(self) -> dict[str, np.ndarray]:
        if self.mean is None:
            return {}
        return {"storyflow.mean": self.mean.copy(), "storyflow.count": np.array([self.count], dtype=np.float64),
                "storyflow.m2": self.m2.copy()}

    @classmethod
    def from_state(cls, state: dict) -> "StoryFlowStats":
        stats = cls()
        if "storyflow.mean" in state:
            stats.mean = np.asarray(state["storyflow.mean"], dtype=np.float64)
            stats.count = int(np.asarray(state["storyflow.count"]).reshape(-1)[0])
            stats.m2 = np.asarray(state.get("storyflow.m2", np.zeros_like(stats.mean)), dtype=np.float64)
        return stats


def inference_storyflow(stats: StoryFlowStats) -> np.ndarray:
    if stats.count == 0 or stats.mean is None:
        raise ValueError("no storyflow statistics accumulated")
    return stats.mean.copy()
