"""Flat ``dotted.key = value`` run configuration with typed defaults."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


# key -> default; the default's type decides how text values are parsed
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "model.dtype": "float64",
    "diffusion.T": 1000,
    "diffusion.schedule": "linear",
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 2e-2,
    "sampler.steps": 50,
    "sampler.guidance": 7.5,
    "sampler.mixed_noise_ratio": 0.5,
    "sampler.eta": 0.0,
    "sampler.clip_x0": 1.0,
    "unet.base_channels": 32,
    "unet.mults": (1, 2, 2, 2),
    "unet.k": 3,
    "unet.heads": 4,
    "unet.groups": 8,
    "unet.mode": "sv",
    "unet.first_frame": "conv",
    "unet.temporal_conv": True,
    "unet.seta": True,
    "unet.rope": True,
    "unet.zero_init_first_frame": True,
    "sc.enabled": True,
    "sc.variant": "full",
    "sc.layers": 4,
    "sc.heads": 4,
    "sc.rope": True,
    "storyflow.enabled": True,
    "storyflow.scale": 1.0,
    "storyflow.norm": "l2",
    "storyflow.interp": "midpoint",
    "text.dim": 32,
    "text.seed": 0,
    "train.lr": 2e-3,
    "train.batch": 1,
    "train.iters": 500,
    "train.drop_prob": 0.1,
    "train.weight_decay": 0.0,
    "train.grad_clip": 1.0,
    "train.schedule": "cosine",
    "train.warmup": 20,
    "train.checkpoint_every": 100,
    "train.per_frame_t": False,
    "data.stories": 1,
    "data.seed": 0,
    "data.cache": "",
    "data.image_size": 32,
}

CHOICES = {
    "model.dtype": ("float32", "float64"),
    "diffusion.schedule": ("linear", "scaled_linear"),
    "unet.mode": ("sv", "sc"),
    "unet.first_frame": ("conv", "concat"),
    "sc.variant": ("full", "simplified", "dual", "dual_self_attention", "causal"),
    "storyflow.norm": ("l2", "rms"),
    "train.schedule": ("constant", "cosine"),
    "storyflow.interp": ("midpoint", "endpoint"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            value = low in _TRUE
        elif isinstance(default, int):
            value = int(text)
        elif isinstance(default, float):
            value = float(text)
        elif isinstance(default, tuple):
            value = tuple(int(v) for v in text.replace(",", " ").split())
            if not value:
                raise ValueError(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} is not one of {CHOICES[key]}")
    return value


class Config(dict):
    """A fully resolved configuration; unknown keys are rejected on set."""

    def __init__(self, values: dict | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = parse_value(key, value)
        super().__setitem__(key, value)

    def update(self, other=(), **kw):
        for k, v in dict(other, **kw).items():
            self[k] = v

    def to_text(self) -> str:
        lines = []
        for key in DEFAULTS:
            v = self[key]
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the file at ``path`` (if given), then ``overrides``."""
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.update(parse_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg
