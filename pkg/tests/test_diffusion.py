import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from storyweave.diffusion import (NoiseSchedule, SamplerConfig, cfg_combine, ddim_step, ddim_timesteps,
                                  forward_diffuse, mixed_noise_prior, predict_x0, sample)
from storyweave.tensor import ShapeError


class StubModel:
    """eps() returns a fixed function of its input and counts calls."""

    def __init__(self, fn=None, frames=3, shape=(2, 2, 2)):
        self.fn = fn or (lambda x, t, s: np.zeros_like(x))
        self.frame_shape = shape
        self.frames = frames
        self.calls = []

    def generated_frames(self, n):
        return n

    def eps(self, x, t, storyline, first_frame=None, deltas=None):
        self.calls.append((t, storyline is None))
        return self.fn(x, t, storyline)


def test_alpha_bar_against_running_product():
    s = NoiseSchedule.linear()
    betas = [1e-4 + i * (2e-2 - 1e-4) / 999 for i in range(1000)]
    prod = 1.0
    for t, b in enumerate(betas, 1):
        prod *= 1.0 - b
        if t in (1, 500, 1000):
            assert s.alpha_bar(t) == pytest.approx(prod, rel=1e-12)
    assert s.alpha_bar(0) == 1.0
    with pytest.raises(IndexError):
        s.alpha_bar(1001)


def test_scaled_linear_endpoints():
    s = NoiseSchedule.scaled_linear(T=10)
    assert s.betas[0] == pytest.approx(8.5e-4)
    assert s.betas[-1] == pytest.approx(1.2e-2)
    assert np.all(np.diff(s.betas) > 0)


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_forward_diffuse_moments(t):
    s = NoiseSchedule.linear()
    rng = np.random.default_rng(t)
    x0 = np.full(100_000, 0.7)
    x = forward_diffuse(s, x0, t, rng.standard_normal(x0.shape))
    ab = s.alpha_bar(t)
    assert x.mean() == pytest.approx(np.sqrt(ab) * 0.7, rel=0.02, abs=0.02 * np.sqrt(1 - ab))
    assert x.var() == pytest.approx(1 - ab, rel=0.02)


def test_forward_then_predict_x0_roundtrip(rng):
    s = NoiseSchedule.linear()
    x0, eps = rng.standard_normal((2, 3, 4))
    xt = forward_diffuse(s, x0, 321, eps)
    np.testing.assert_allclose(predict_x0(s, xt, eps, 321), x0, atol=1e-10)


def test_forward_diffuse_rejects_bad_input():
    s = NoiseSchedule.linear(T=10)
    with pytest.raises(ShapeError):
        forward_diffuse(s, np.zeros(3), 1, np.zeros(4))
    with pytest.raises(IndexError):
        forward_diffuse(s, np.zeros(3), 0, np.zeros(3))


def test_ddim_step_with_true_noise_lands_on_data(rng):
    s = NoiseSchedule.linear()
    x0, eps = rng.standard_normal((2, 5))
    xt = forward_diffuse(s, x0, 800, eps)
    np.testing.assert_allclose(ddim_step(s, xt, eps, 800, 0), x0, atol=1e-10)
    np.testing.assert_allclose(ddim_step(s, xt, eps, 800, 300), forward_diffuse(s, x0, 300, eps), atol=1e-10)


def test_ddim_clip_keeps_prediction_in_range(rng):
    s = NoiseSchedule.linear()
    xt = rng.standard_normal(50) * 3
    out = ddim_step(s, xt, np.zeros(50), 1000, 0, clip_x0=1.0)
    assert np.abs(out).max() <= 1.0


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 50)[:3] == [1000, 980, 960]
    assert ddim_timesteps(1000, 50)[-1] == 20
    assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 20), st.integers(0, 1000))
def test_cfg_combine_affine(s, seed):
    e = np.random.default_rng(seed).standard_normal(6)
    z = np.zeros(6)
    np.testing.assert_allclose(cfg_combine(z, cfg_combine(z, e, s), 1 / s), e, rtol=1e-13, atol=1e-15)
    assert np.array_equal(cfg_combine(z, cfg_combine(z, e, 2.0), 0.5), e)
    np.testing.assert_allclose(cfg_combine(e * 0.3, e, 1.0), e, atol=1e-15)


def test_mixed_noise_correlations():
    rng = np.random.default_rng(0)
    for ratio, want in [(0.0, 0.0), (0.5, 0.5)]:
        x = mixed_noise_prior(2, (100_000,), ratio, rng)
        assert np.corrcoef(x[0], x[1])[0, 1] == pytest.approx(want, abs=0.05)
        assert x.var() == pytest.approx(1.0, rel=0.02)
    x = mixed_noise_prior(3, (10,), 1.0, rng)
    assert np.array_equal(x[0], x[2])
    with pytest.raises(ValueError):
        mixed_noise_prior(3, (2,), 1.5, rng)


def test_single_step_zero_model_closed_form():
    s = NoiseSchedule.linear()
    m = StubModel()
    out = sample(m, np.zeros((1, 3, 2, 4)), SamplerConfig(steps=1, guidance_scale=1.0), s, np.random.default_rng(5))
    noise = mixed_noise_prior(3, m.frame_shape, 0.5, np.random.default_rng(5), batch=1)
    np.testing.assert_allclose(out, noise / np.sqrt(s.alpha_bar(1000)))


@pytest.mark.parametrize("scale, calls", [(1.0, 10), (7.5, 20)])
def test_model_call_count(scale, calls):
    m = StubModel()
    sample(m, np.zeros((1, 3, 2, 4)), SamplerConfig(steps=10, guidance_scale=scale), NoiseSchedule.linear(),
           np.random.default_rng(0))
    assert len(m.calls) == calls
    assert sum(u for _, u in m.calls) == calls - 10


def test_sampling_deterministic_with_eta_zero():
    fn = lambda x, t, s: 0.5 * x  # noqa: E731
    outs = [sample(StubModel(fn), np.zeros((1, 3, 2, 4)), SamplerConfig(steps=5), NoiseSchedule.linear(),
                   np.random.default_rng(9)) for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


def test_sample_frame_count_mismatch():
    with pytest.raises(ShapeError):
        sample(StubModel(), np.zeros((1, 3, 2, 4)), SamplerConfig(steps=2), NoiseSchedule.linear(),
               np.random.default_rng(0), n_frames=4)


def test_sampler_defaults():
    c = SamplerConfig()
    assert (c.steps, c.guidance_scale) == (50, 7.5)
