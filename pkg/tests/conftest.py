import numpy as np
import pytest

from storyweave import tensor as T
from storyweave.contextualizer import ContextualizerConfig
from storyweave.model import ModelConfig, StoryDiffusionModel
from storyweave.unet import UNetConfig

# config overrides for a model small enough to train in seconds
TINY = {
    "unet.base_channels": "8",
    "unet.mults": "1,2",
    "unet.heads": "2",
    "unet.groups": "2",
    "sc.layers": "1",
    "sc.heads": "2",
    "text.dim": "24",
}


def tiny_model_config(mode="sv", first_frame="conv", **kw) -> ModelConfig:
    unet = UNetConfig(base_channels=8, mults=(1, 2), heads=2, groups=2, context_dim=24, mode=mode,
                      first_frame=first_frame)
    sc = ContextualizerConfig(dim=24, layers=1, heads=2)
    return ModelConfig(unet=unet, sc=sc, latent_size=kw.pop("latent_size", 8), **kw)


def tiny_model(seed=0, **kw) -> StoryDiffusionModel:
    return StoryDiffusionModel(tiny_model_config(**kw)).init_weights(seed)


def randomize_except(module, keep, seed: int = 0, scale: float = 0.2):
    """Random values for every parameter whose name contains none of ``keep``.

    Outputs of zero-initialised residual branches are zero, so at-init
    properties are checked on an otherwise random network.
    """
    keep = (keep,) if isinstance(keep, str) else tuple(keep)
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if not any(k in name for k in keep):
            p.data = scale * rng.standard_normal(p.shape)
    return module


def copy_shared(src, dst):
    """Load ``src``'s parameters into ``dst`` where names match; the rest keep their init."""
    dst.load_state_dict(src.state_dict(), strict=False)
    return dst


@pytest.fixture(autouse=True)
def _fp64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---- acceptance reporting ----------------------------------------------------
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
