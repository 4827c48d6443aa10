"""Spatiotemporal denoising UNet.

Each block runs: spatial conv (ResBlock, with the per-frame time+storyflow
embedding and, for story continuation, the resized first-frame latent) ->
temporal conv -> spatial transformer (self + frame-aligned cross attention)
-> SETA block. The deepest down block and the first up block carry no
attention. As in the SD UNet, every residual branch and the output conv
end in zero-initialised layers; for the temporal modules this also means a
fresh network treats frames independently.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import SETABlock, SpatialTransformer
from .nn import Conv2d, GroupNorm, Linear, Module, TemporalConv1d, group_count
from .tensor import ShapeError, Tensor

MODES = ("visualization", "continuation")


@dataclass
class UNetConfig:
    in_channels: int = 12
    base_channels: int = 32
    mults: tuple[int, ...] = (1, 2, 2, 2)
    k: int = 3
    heads: int = 4
    groups: int = 8
    context_dim: int = 32
    mode: str = "visualization"
    first_frame: str = "conv"
    temporal_conv: bool = True
    seta: bool = True
    rope: bool = True
    zero_init_first_frame: bool = True
    padding: str = "zeros"

    def __post_init__(self):
        self.mults = tuple(int(m) for m in self.mults)
        if self.mode in ("sv", "sc"):
            self.mode = {"sv": "visualization", "sc": "continuation"}[self.mode]
        if self.mode not in MODES:
            raise ValueError(f"unknown UNet mode {self.mode!r}")
        if self.first_frame not in ("conv", "concat"):
            raise ValueError(f"unknown first-frame method {self.first_frame!r}")
        if self.first_frame == "concat" and self.mode != "continuation":
            raise ValueError("first-frame concatenation only applies to continuation mode")
        if not self.mults:
            raise ValueError("need at least one level")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.mults]

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    @property
    def inject_first_frame(self) -> bool:
        return self.mode == "continuation" and self.first_frame == "conv"

    def has_attention(self, level: int) -> bool:
        return level < len(self.mults) - 1


class FirstFrameInject(Module):
    """Nearest-resize the first-frame latent and map it to ``channels`` with a 1x1 conv."""

    def __init__(self, latent_channels: int, channels: int, zero: bool = True):
        self.proj = Conv2d(latent_channels, channels, kernel=1, zero=zero)

    def forward(self, z1: Tensor, size: tuple[int, int], n_frames: int) -> Tensor:
        h = self.proj(T.resize_nearest(z1, size))  # b, c, h, w
        b = h.shape[0]
        h = T.reshape(h, (b, 1) + h.shape[1:])
        h = T.broadcast_to(h, (b, n_frames) + h.shape[2:])
        return T.reshape(h, (b * n_frames,) + h.shape[2:])


def first_frame_inject(hidden: Tensor, z1: Tensor, inject: FirstFrameInject, n_frames: int) -> Tensor:
    """Concatenate the projected first frame to hidden (b*n, c, h, w) along channels."""
    if z1 is None:
        raise ValueError("continuation mode needs a first-frame latent")
    return T.concat([hidden, inject(z1, hidden.shape[-2:], n_frames)], axis=1)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, cfg: UNetConfig, inject: bool):
        self.norm1 = GroupNorm(group_count(c_in, cfg.groups), c_in)
        self.inject = FirstFrameInject(cfg.in_channels, c_in, cfg.zero_init_first_frame) if inject else None
        self.conv1 = Conv2d(c_in, c_out, padding=cfg.padding)
        # kernel slice for the concatenated first-frame channels, kept as its own tensor so that
        # conv1 has the same shape (and initial values) with and without continuation
        self.conv1_first = Conv2d(c_in, c_out, padding=cfg.padding, bias=False) if inject else None
        self.emb_proj = Linear(emb_dim, c_out)
        self.norm2 = GroupNorm(group_count(c_out, cfg.groups), c_out)
        self.conv2 = Conv2d(c_out, c_out, padding=cfg.padding, zero=True)
        self.skip = Conv2d(c_in, c_out, kernel=1) if c_in != c_out else None

    def forward(self, x: Tensor, emb: Tensor, first_frame: Tensor | None, n_frames: int) -> Tensor:
        h = T.silu(self.norm1(x))
        if self.inject is not None:
            h = first_frame_inject(h, first_frame, self.inject, n_frames)
            w = T.concat([self.conv1.weight, self.conv1_first.weight], axis=1)
            h = T.conv2d(h, w, self.conv1.bias, padding=self.conv1.padding)
        else:
            h = self.conv1(h)
        e = self.emb_proj(T.silu(emb))  # b*n, c_out
        h = h + T.reshape(e, e.shape + (1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class TemporalConvBlock(Module):
    """Residual pair of 3-tap convolutions along the frame axis; zero output at init."""

    def __init__(self, channels: int, cfg: UNetConfig):
        g = group_count(channels, cfg.groups)
        self.norm1 = GroupNorm(g, channels)
        self.conv1 = TemporalConv1d(channels, channels)
        self.norm2 = GroupNorm(g, channels)
        self.conv2 = TemporalConv1d(channels, channels, zero=True)

    def forward(self, x: Tensor, n_frames: int) -> Tensor:
        bn, c, h, w = x.shape
        b = bn // n_frames
        seq = T.transpose(T.reshape(x, (b, n_frames, c, h * w)), (0, 3, 2, 1))
        seq = T.reshape(seq, (b * h * w, c, n_frames))
        y = self.conv1(T.silu(self.norm1(seq)))
        y = self.conv2(T.silu(self.norm2(y)))
        y = T.transpose(T.reshape(y, (b, h * w, c, n_frames)), (0, 3, 2, 1))
        return x + T.reshape(y, (bn, c, h, w))


class StoryBlock(Module):
    """ResBlock -> temporal conv -> spatial transformer -> SETA."""

    def __init__(self, c_in: int, c_out: int, cfg: UNetConfig, attention: bool):
        emb = cfg.time_dim
        self.res = ResBlock(c_in, c_out, emb, cfg, inject=cfg.inject_first_frame)
        self.tconv = TemporalConvBlock(c_out, cfg) if cfg.temporal_conv else None
        self.attn = SpatialTransformer(c_out, cfg.context_dim, cfg.heads) if attention else None
        self.seta = SETABlock(c_out, cfg.heads, cfg.k, cfg.rope) if attention and cfg.seta else None

    def forward(self, x: Tensor, emb: Tensor, ctx: Tensor, first_frame, n: int) -> Tensor:
        x = self.res(x, emb, first_frame, n)
        if self.tconv is not None:
            x = self.tconv(x, n)
        if self.attn is not None:
            bn, c, h, w = x.shape
            z = T.reshape(x, (bn // n, n, c, h, w))
            z = self.attn(z, ctx)
            if self.seta is not None:
                z = self.seta(z)
            x = T.reshape(z, (bn, c, h, w))
        return x


class Downsample(Module):
    def __init__(self, channels: int, cfg: UNetConfig):
        self.conv = Conv2d(channels, channels, stride=2, padding=cfg.padding)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, channels: int, cfg: UNetConfig):
        self.conv = Conv2d(channels, channels, padding=cfg.padding)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))


class StoryUNet(Module):
    def __init__(self, cfg: UNetConfig | None = None, **kwargs):
        cfg = cfg or UNetConfig(**kwargs)
        self.cfg = cfg
        chans = cfg.channels
        levels = len(chans)
        c_in = cfg.in_channels * (2 if cfg.mode == "continuation" and cfg.first_frame == "concat" else 1)
        self.conv_in = Conv2d(c_in, chans[0], padding=cfg.padding)
        self.down = []
        self.downsample = []
        prev = chans[0]
        for lvl, c in enumerate(chans):
            self.down.append(StoryBlock(prev, c, cfg, cfg.has_attention(lvl)))
            self.downsample.append(Downsample(c, cfg) if lvl < levels - 1 else None)
            prev = c
        self.mid1 = StoryBlock(prev, prev, cfg, attention=True)
        self.mid2 = StoryBlock(prev, prev, cfg, attention=False)
        self.up = []
        self.upsample = []
        for j, lvl in enumerate(reversed(range(levels))):
            c = chans[lvl]
            self.up.append(StoryBlock(prev + c, c, cfg, cfg.has_attention(lvl)))
            self.upsample.append(Upsample(c, cfg) if lvl > 0 else None)
            prev = c
        self.norm_out = GroupNorm(group_count(prev, cfg.groups), prev)
        self.conv_out = Conv2d(prev, cfg.in_channels, padding=cfg.padding, zero=True)

    def forward(self, z: Tensor, emb: Tensor, ctx: Tensor, first_frame: Tensor | None = None) -> Tensor:
        """z (b, n, C, H, W); emb (b, n, time_dim); ctx (b, n, l, d) -> predicted noise like z."""
        cfg = self.cfg
        if z.ndim != 5 or z.shape[2] != cfg.in_channels:
            raise ShapeError(f"UNet expects (batch, frames, {cfg.in_channels}, h, w), got {z.shape}")
        b, n, c, h, w = z.shape
        if ctx.shape[:2] != (b, n):
            raise ShapeError(f"storyline {ctx.shape} does not match {n} frames of hidden {z.shape}")
        if emb.shape[:2] != (b, n):
            raise ShapeError(f"embedding {emb.shape} does not match latents {z.shape}")
        if (first_frame is not None) != (cfg.mode == "continuation"):
            raise ValueError(f"{cfg.mode} mode {'requires' if first_frame is None else 'rejects'} a first frame")
        if first_frame is not None:
            first_frame = T.as_tensor(first_frame)
            if first_frame.shape != (b, c, h, w):
                raise ShapeError(f"first frame {first_frame.shape} does not match latent frames {(b, c, h, w)}")
        if cfg.mode == "continuation" and cfg.first_frame == "concat":
            x = T.reshape(first_frame_concat_variant(z, first_frame), (b * n, 2 * c, h, w))
            inject = None
        else:
            x = T.reshape(z, (b * n, c, h, w))
            inject = first_frame
        e = T.reshape(emb, (b * n, emb.shape[-1]))
        x = self.conv_in(x)
        skips = []
        for block, down in zip(self.down, self.downsample):
            x = block(x, e, ctx, inject, n)
            skips.append(x)
            if down is not None:
                x = down(x)
        x = self.mid1(x, e, ctx, inject, n)
        x = self.mid2(x, e, ctx, inject, n)
        for block, up in zip(self.up, self.upsample):
            x = block(T.concat([x, skips.pop()], axis=1), e, ctx, inject, n)
            if up is not None:
                x = up(x)
        x = self.conv_out(T.silu(self.norm_out(x)))
        return T.reshape(x, (b, n, c, h, w))


def unet_forward(unet: StoryUNet, z_t: Tensor, emb: Tensor, ctx: Tensor, first_frame=None) -> Tensor:
    return unet(z_t, emb, ctx, first_frame)


def first_frame_concat_variant(z_latents: Tensor, z1: Tensor) -> Tensor:
    """Input-level alternative: stack the first-frame latent onto every noisy frame's channels."""
    z_latents = T.as_tensor(z_latents)
    z1 = T.as_tensor(z1)
    b, n, c, h, w = z_latents.shape
    ff = T.broadcast_to(T.reshape(z1, (b, 1, c, h, w)), (b, n, c, h, w))
    return T.concat([z_latents, ff], axis=2)


__all__ = ["UNetConfig", "StoryUNet", "ResBlock", "TemporalConvBlock", "FirstFrameInject", "first_frame_inject",
           "first_frame_concat_variant", "unet_forward"]
