"""Noise schedule, forward process, DDIM updates and guided sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    @classmethod
    def scaled_linear(cls, T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))

    @classmethod
    def from_config(cls, cfg) -> "NoiseSchedule":
        kind = cfg.get("diffusion.schedule", "linear")
        args = (cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
        if kind == "linear":
            return cls.linear(*args)
        if kind == "scaled_linear":
            return cls.scaled_linear(*args)
        raise ValueError(f"unknown schedule {kind!r}")

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t):
        """ᾱ at 1-based step t; t = 0 maps to 1 (clean data)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise IndexError(f"timestep {t} outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def _coef(values, x):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    return values.reshape(values.shape + (1,) * (np.ndim(x) - values.ndim))


def _check_step(schedule: NoiseSchedule, t) -> None:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")


def forward_diffuse(schedule: NoiseSchedule, x0, t, eps):
    """Sample x_t ~ q(x_t | x_0) given the noise draw ``eps``.

    ``t`` is a scalar or an array broadcast against the leading axes of x0.
    """
    if np.shape(eps) != np.shape(x0):
        raise ShapeError(f"forward_diffuse: eps shape {np.shape(eps)} differs from x0 shape {np.shape(x0)}")
    _check_step(schedule, t)
    ab = schedule.alpha_bar(t)
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(schedule: NoiseSchedule, x_t, eps_hat, t):
    ab = schedule.alpha_bar(t)
    return (x_t - _coef(np.sqrt(1.0 - ab), x_t) * eps_hat) / _coef(np.sqrt(ab), x_t)


def ddim_step(schedule: NoiseSchedule, x_t, eps_hat, t: int, t_prev: int, eta: float = 0.0,
              rng: np.random.Generator | None = None, clip_x0: float | None = None):
    """One DDIM update from t to t_prev.

    With ``clip_x0`` the predicted clean sample is clipped to [-clip_x0, clip_x0]
    and the noise estimate re-derived from it, keeping the two consistent.
    """
    if not 0 <= t_prev < t:
        raise IndexError(f"ddim_step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    _check_step(schedule, t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0 = predict_x0(schedule, x_t, eps_hat, t)
    if clip_x0:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        eps_hat = (x_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    if eta == 0.0:
        return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    if rng is None:
        raise ValueError("eta > 0 needs a random generator")
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    return np.sqrt(ab_prev) * x0 + direction + sigma * rng.standard_normal(np.shape(x_t))


def cfg_combine(eps_uncond, eps_cond, scale: float):
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise ShapeError(f"cfg_combine: shapes {np.shape(eps_uncond)} and {np.shape(eps_cond)} differ")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def mixed_noise_prior(n_frames: int, frame_shape, ratio: float, rng: np.random.Generator, batch: int | None = None):
    """Per-frame noise sharing a common component across frames.

    Each frame is sqrt(ratio) * shared + sqrt(1 - ratio) * own, so every
    element stays unit-variance and frames correlate with coefficient ratio.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mixed noise ratio must be in [0, 1], got {ratio}")
    lead = () if batch is None else (batch,)
    frame_shape = tuple(frame_shape)
    shared = rng.standard_normal(lead + (1,) + frame_shape)
    own = rng.standard_normal(lead + (n_frames,) + frame_shape)
    return np.sqrt(ratio) * shared + np.sqrt(1.0 - ratio) * own


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride, descending, 1-based timesteps starting at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [T - i * stride for i in range(steps)]


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    mixed_noise_ratio: float = 0.5
    clip_x0: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be nonnegative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")

    @classmethod
    def from_config(cls, cfg) -> "SamplerConfig":
        return cls(steps=cfg["sampler.steps"], guidance_scale=cfg["sampler.guidance"],
                   eta=cfg["sampler.eta"], mixed_noise_ratio=cfg["sampler.mixed_noise_ratio"],
                   clip_x0=cfg["sampler.clip_x0"] or None)


def sample(model, storyline, config: SamplerConfig, schedule: NoiseSchedule, rng: np.random.Generator,
           first_frame=None, deltas=None, n_frames: int | None = None):
    """Run guided DDIM from mixed-prior noise and return clean latents.

    ``model`` must provide ``eps(z_t, t, storyline, first_frame=, deltas=)``
    (``storyline=None`` requests the unconditional prediction),
    ``frame_shape`` and ``generated_frames(n_sentences)``.
    """
    storyline = np.asarray(storyline) if not hasattr(storyline, "data") else storyline
    batch, n_sent = storyline.shape[:2]
    n_gen = model.generated_frames(n_sent)
    if n_frames is not None and n_frames != n_gen:
        raise ShapeError(f"storyline with {n_sent} sentences yields {n_gen} frames, {n_frames} requested")
    if config.steps > schedule.T:
        raise ValueError(f"steps {config.steps} exceed schedule length {schedule.T}")
    x = mixed_noise_prior(n_gen, model.frame_shape, config.mixed_noise_ratio, rng, batch=batch)
    ts = ddim_timesteps(schedule.T, config.steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = model.eps(x, t, storyline, first_frame=first_frame, deltas=deltas)
        if config.guidance_scale != 1.0:
            eps_u = model.eps(x, t, None, first_frame=first_frame, deltas=deltas)
            eps = cfg_combine(eps_u, eps, config.guidance_scale)
        x = ddim_step(schedule, x, eps, t, t_prev, config.eta, rng, config.clip_x0)
    return x
