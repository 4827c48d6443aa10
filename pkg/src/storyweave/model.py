"""The full denoiser: text conditioning + contextualizer + StoryFlow + UNet."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .contextualizer import ContextualizerConfig, StorylineContextualizer
from .data import TOKENS_PER_SENTENCE, VOCAB_SIZE, ToyTextEmbedder
from .nn import Linear, Module, Parameter
from .storyflow import StoryFlowAdapter, StoryFlowStats, inference_storyflow, inject, sinusoidal_embedding
from .tensor import ShapeError, Tensor
from .unet import StoryUNet, UNetConfig


@dataclass
class ModelConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    sc: ContextualizerConfig = field(default_factory=ContextualizerConfig)
    sc_enabled: bool = True
    storyflow_enabled: bool = True
    storyflow_scale: float = 1.0
    storyflow_norm: str = "l2"
    storyflow_interp: str = "midpoint"
    latent_size: int = 16
    text_seed: int = 0

    def __post_init__(self):
        if self.sc.dim != self.unet.context_dim:
            raise ValueError(f"contextualizer width {self.sc.dim} != UNet context width {self.unet.context_dim}")

    @property
    def text_dim(self) -> int:
        return self.unet.context_dim

    @property
    def continuation(self) -> bool:
        return self.unet.mode == "continuation"

    @classmethod
    def from_config(cls, cfg) -> "ModelConfig":
        unet = UNetConfig(
            base_channels=cfg["unet.base_channels"], mults=cfg["unet.mults"], k=cfg["unet.k"],
            heads=cfg["unet.heads"], groups=cfg["unet.groups"], context_dim=cfg["text.dim"],
            mode=cfg["unet.mode"], first_frame=cfg["unet.first_frame"], temporal_conv=cfg["unet.temporal_conv"],
            seta=cfg["unet.seta"], rope=cfg["unet.rope"], zero_init_first_frame=cfg["unet.zero_init_first_frame"],
        )
        sc = ContextualizerConfig(dim=cfg["text.dim"], layers=cfg["sc.layers"], variant=cfg["sc.variant"],
                                  heads=cfg["sc.heads"], rope=cfg["sc.rope"])
        return cls(unet=unet, sc=sc, sc_enabled=cfg["sc.enabled"], storyflow_enabled=cfg["storyflow.enabled"],
                   storyflow_scale=cfg["storyflow.scale"], storyflow_norm=cfg["storyflow.norm"],
                   storyflow_interp=cfg["storyflow.interp"], latent_size=cfg["data.image_size"] // 2,
                   text_seed=cfg["text.seed"])


STATS_KEYS = ("storyflow.mean", "storyflow.count", "storyflow.m2")


class StoryDiffusionModel(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        base, tdim = cfg.unet.base_channels, cfg.unet.time_dim
        self.time_fc1 = Linear(base, tdim)
        self.time_fc2 = Linear(tdim, tdim)
        self.null_text = Parameter((cfg.text_dim,), "normal", std=1.0 / np.sqrt(cfg.text_dim))
        self.contextualizer = StorylineContextualizer(cfg.sc) if cfg.sc_enabled else None
        self.storyflow_adapter = (StoryFlowAdapter(tdim, freq_dim=base, scale=cfg.storyflow_scale,
                                           interp=cfg.storyflow_interp) if cfg.storyflow_enabled else None)
        self.unet = StoryUNet(cfg.unet)
        self._embedder = None
        self.stats = StoryFlowStats()

    # ---- shapes ------------------------------------------------------------
    @property
    def frame_shape(self) -> tuple[int, int, int]:
        s = self.cfg.latent_size
        return (self.cfg.unet.in_channels, s, s)

    def generated_frames(self, n_sentences: int) -> int:
        return n_sentences - 1 if self.cfg.continuation else n_sentences

    @property
    def embedder(self) -> ToyTextEmbedder:
        # built on first use: tiny test models have text widths below the vocabulary size
        if self._embedder is None:
            self._embedder = ToyTextEmbedder(VOCAB_SIZE, self.cfg.text_dim, self.cfg.text_seed)
        return self._embedder

    def embed_tokens(self, tokens) -> np.ndarray:
        return self.embedder(tokens)

    # ---- conditioning --------------------------------------------------------
    def condition(self, text, batch: int, n_sent: int, drop=None) -> Tensor:
        """Storyline embedding (b, n, l, d), with dropped stories replaced by the null vector."""
        d = self.cfg.text_dim
        null = T.reshape(self.null_text, (1, 1, 1, d))
        if text is None:
            ctx = T.broadcast_to(null, (batch, n_sent, TOKENS_PER_SENTENCE, d))
        else:
            text = T.as_tensor(text)
            if text.ndim != 4 or text.shape[:2] != (batch, n_sent) or text.shape[-1] != d:
                raise ShapeError(f"storyline {text.shape} does not match (batch={batch}, sentences={n_sent}, d={d})")
            ctx = text
            if drop is not None and np.any(drop):
                m = np.asarray(drop, dtype=T.get_default_dtype()).reshape(batch, 1, 1, 1)
                ctx = ctx * (1.0 - m) + T.broadcast_to(null, text.shape) * m
        if self.contextualizer is not None:
            ctx = self.contextualizer(ctx)
        return ctx

    def embedding(self, t, deltas, batch: int, n_sent: int) -> Tensor:
        """Per-frame conditioning vector: timestep embedding plus StoryFlow embedding."""
        base = self.cfg.unet.base_channels
        t = np.broadcast_to(np.asarray(t), (batch,))
        temb = self.time_fc2(T.silu(self.time_fc1(T.Tensor(sinusoidal_embedding(t, base)))))
        if self.storyflow_adapter is None:
            return T.broadcast_to(T.reshape(temb, (batch, 1, temb.shape[-1])), (batch, n_sent, temb.shape[-1]))
        if deltas is None:
            deltas = inference_storyflow(self.stats)
        deltas = np.broadcast_to(np.asarray(deltas, dtype=np.float64), (batch, n_sent - 1))
        return inject(self.storyflow_adapter.embed(deltas, n_sent), temb)

    def forward(self, z_t, t, text, deltas=None, first_frame=None, drop=None) -> Tensor:
        z_t = T.as_tensor(z_t)
        if z_t.ndim != 5:
            raise ShapeError(f"latents must be (batch, frames, c, h, w), got {z_t.shape}")
        batch, n = z_t.shape[:2]
        n_sent = n + 1 if self.cfg.continuation else n
        ctx = self.condition(text, batch, n_sent, drop)
        emb = self.embedding(t, deltas, batch, n_sent)
        if self.cfg.continuation:
            # the first sentence describes the given frame; only frames 2..N are denoised
            ctx = ctx[:, 1:]
            emb = emb[:, 1:]
        return self.unet(z_t, emb, ctx, first_frame)

    def eps(self, z_t, t, storyline, first_frame=None, deltas=None) -> np.ndarray:
        """Inference-time noise prediction (no graph)."""
        with T.no_grad():
            out = self.forward(z_t, t, storyline, deltas=deltas, first_frame=first_frame)
        return out.data

    # ---- persistence -------------------------------------------------------
    def checkpoint_state(self) -> dict[str, np.ndarray]:
        state = self.state_dict()
        state.update(self.stats.state())
        return state

    def load_checkpoint_state(self, state: dict[str, np.ndarray]) -> None:
        params = {k: v for k, v in state.items() if k not in STATS_KEYS}
        self.load_state_dict(params)
        self.stats = StoryFlowStats.from_state(state)
