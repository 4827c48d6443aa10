"""Denoising objectives, condition dropping, AdamW and the training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, forward_diffuse, mixed_noise_prior
from .storyflow import compute_storyflow
from .tensor import ShapeError, Tensor


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch: int = 1
    iters: int = 500
    drop_prob: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    per_frame_t: bool = False
    mixed_noise_ratio: float = 0.5
    ema: float = 0.98
    grad_clip: float = 1.0
    schedule: str = "constant"
    warmup: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("batch must be >= 1 and iters >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``: linear warmup, then constant or cosine decay to 0."""
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        if self.schedule == "constant":
            return self.lr
        span = max(self.iters - self.warmup, 1)
        frac = min((step - self.warmup) / span, 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    @classmethod
    def from_config(cls, cfg) -> "TrainConfig":
        return cls(lr=cfg["train.lr"], batch=cfg["train.batch"], iters=cfg["train.iters"],
                   drop_prob=cfg["train.drop_prob"], weight_decay=cfg["train.weight_decay"], seed=cfg["seed"],
                   per_frame_t=cfg["train.per_frame_t"], mixed_noise_ratio=cfg["sampler.mixed_noise_ratio"],
                   grad_clip=cfg["train.grad_clip"], schedule=cfg["train.schedule"], warmup=cfg["train.warmup"])


# ---- conditioning dropout --------------------------------------------------
def drop_mask(batch: int, p: float, rng) -> np.ndarray:
    """One Bernoulli(p) draw per storyline."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {p}")
    return rng.random(batch) < p


def drop_condition(storyline, p: float, rng, null=None) -> np.ndarray:
    """Replace whole storylines (all sentences together) by the null embedding with probability p.

    ``storyline`` is (b, n, l, d); ``null`` is a (d,) vector (zeros if omitted).
    """
    s = np.asarray(storyline)
    if s.ndim != 4:
        raise ShapeError(f"storyline must be (batch, n, l, d), got {s.shape}")
    mask = drop_mask(s.shape[0], p, rng)
    null = np.zeros(s.shape[-1]) if null is None else np.asarray(null.data if isinstance(null, Tensor) else null)
    return np.where(mask[:, None, None, None], np.broadcast_to(null, s.shape), s)


# ---- objectives ------------------------------------------------------------
def _timesteps(schedule: NoiseSchedule, batch: int, n: int, per_frame: bool, rng) -> np.ndarray:
    if per_frame:
        return rng.integers(1, schedule.T + 1, size=(batch, n))
    return rng.integers(1, schedule.T + 1, size=batch)


def _noisy(schedule, z0, t, ratio, rng):
    b, n = z0.shape[:2]
    eps = mixed_noise_prior(n, z0.shape[2:], ratio, rng, batch=b)
    tt = t if t.ndim == 2 else np.repeat(t[:, None], n, axis=1)
    x_t = forward_diffuse(schedule, z0, tt.reshape(b, n, 1, 1, 1), eps)
    return x_t, eps


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return T.mean(diff * diff)


def loss_sv(model, z0, text, schedule: NoiseSchedule, rng, drop_prob: float = 0.0, ratio: float = 0.5,
            per_frame_t: bool = False) -> Tensor:
    """Noise-prediction MSE over all frames of each story.

    ``z0`` (b, n, c, h, w) clean latents, ``text`` (b, n, l, d) sentence embeddings.
    """
    z0 = np.asarray(z0, dtype=T.get_default_dtype())
    b, n = z0.shape[:2]
    t = _timesteps(schedule, b, n, per_frame_t, rng)
    x_t, eps = _noisy(schedule, z0, t, ratio, rng)
    drop = drop_mask(b, drop_prob, rng)
    deltas = compute_storyflow(z0, model.cfg.storyflow_norm)
    pred = model(x_t, t if t.ndim == 1 else t[:, 0], text, deltas=deltas, drop=drop)
    return _mse(pred, eps)


def loss_sc(model, z0, text, schedule: NoiseSchedule, rng, drop_prob: float = 0.0, ratio: float = 0.5,
            per_frame_t: bool = False) -> Tensor:
    """Continuation objective: the clean first latent conditions, frames 2..N are denoised and scored."""
    z0 = np.asarray(z0, dtype=T.get_default_dtype())
    b, n = z0.shape[:2]
    if n < 2:
        raise ValueError("continuation needs at least two frames")
    first, rest = z0[:, 0], z0[:, 1:]
    t = _timesteps(schedule, b, n - 1, per_frame_t, rng)
    x_t, eps = _noisy(schedule, rest, t, ratio, rng)
    drop = drop_mask(b, drop_prob, rng)
    deltas = compute_storyflow(z0, model.cfg.storyflow_norm)
    pred = model(x_t, t if t.ndim == 1 else t[:, 0], text, deltas=deltas, first_frame=first, drop=drop)
    return _mse(pred, eps)


def story_loss(model, z0, text, schedule, rng, **kw) -> Tensor:
    fn = loss_sc if model.cfg.continuation else loss_sv
    return fn(model, z0, text, schedule, rng, **kw)


# ---- optimizer -------------------------------------------------------------
def adamw_step(params, grads, state: dict, lr: float, wd: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    """In-place AdamW update on lists of arrays. ``state`` holds m, v and the step count."""
    b1, b2 = betas
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    step = state["step"]
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if wd:
            p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class AdamW:
    def __init__(self, params, lr: float = 5e-5, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state: dict = {}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        adamw_step([p.data for p in self.params], grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---- loop ------------------------------------------------------------------
def train(model, z0, text, cfg: TrainConfig, schedule: NoiseSchedule, log=None, on_step=None) -> list[float]:
    """Fit ``model`` on the stories (z0, text); each step draws ``cfg.batch`` of them.

    Returns the per-step losses. ``log(step, loss, ema)`` is called every step.
    """
    z0 = np.asarray(z0, dtype=T.get_default_dtype())
    text = np.asarray(text, dtype=T.get_default_dtype())
    rng = np.random.default_rng(cfg.seed)
    model.stats.update(compute_storyflow(z0, model.cfg.storyflow_norm))
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    model.train()
    losses: list[float] = []
    ema = None
    n_stories = z0.shape[0]
    for step in range(1, cfg.iters + 1):
        idx = np.arange(n_stories) if n_stories <= cfg.batch else rng.choice(n_stories, cfg.batch, replace=False)
        opt.zero_grad()
        loss = story_loss(model, z0[idx], text[idx], schedule, rng, drop_prob=cfg.drop_prob,
                          ratio=cfg.mixed_noise_ratio, per_frame_t=cfg.per_frame_t)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"loss diverged at step {step}: {value}")
        loss.backward()
        opt.lr = cfg.lr_at(step)
        opt.step()
        losses.append(value)
        ema = value if ema is None else cfg.ema * ema + (1 - cfg.ema) * value
        if log is not None:
            log(step, value, ema)
        if on_step is not None:
            on_step(step)
    model.eval()
    return losses


def eval_loss(model, z0, text, schedule: NoiseSchedule, draws: int = 16, seed: int = 1234, ratio: float = 0.5) -> float:
    """Mean denoising loss over a fixed set of (t, noise) draws, without dropout or gradients."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with T.no_grad():
        for _ in range(draws):
            total += float(story_loss(model, z0, text, schedule, rng, drop_prob=0.0, ratio=ratio).data)
    return total / draws
