import dataclasses

import numpy as np
import pytest

from storyweave.checkpoint import load_tensors, save_tensors
from storyweave.model import StoryDiffusionModel
from storyweave.tensor import ShapeError

from conftest import copy_shared, randomize_except, tiny_model, tiny_model_config


def story_inputs(rng, n=3, size=8, d=24):
    z = rng.standard_normal((1, n, 12, size, size))
    text = rng.standard_normal((1, n, 4, d))
    deltas = np.abs(rng.standard_normal((1, n - 1)))
    return z, text, deltas


def test_storyflow_adapter_has_no_effect_at_init(rng):
    z, text, deltas = story_inputs(rng)
    without = StoryDiffusionModel(tiny_model_config(storyflow_enabled=False)).init_weights(0)
    randomize_except(without, "storyflow", seed=1)
    with_sf = copy_shared(without, tiny_model())
    assert not with_sf.storyflow_adapter.fc2.weight.data.any()
    a = with_sf.eps(z, 500, text, deltas=deltas)
    b = without.eps(z, 500, text)
    assert np.abs(a - b).max() < 1e-9


def test_continuation_branch_has_no_effect_at_init(rng):
    """Continuation on frames 2..N equals visualization of those frames while the 1x1 conv is zero.

    The contextualizer sees all N sentences in continuation mode, so it stays at its identity init here.
    """
    z, text, deltas = story_inputs(rng, n=4)
    sv = randomize_except(tiny_model(), ("storyflow", "contextualizer"), seed=2)
    sc = copy_shared(sv, tiny_model(mode="sc"))
    a = sc.eps(z[:, 1:], 300, text, first_frame=z[:, 0], deltas=deltas)
    b = sv.eps(z[:, 1:], 300, text[:, 1:], deltas=deltas[:, 1:])
    assert np.abs(a).max() > 1e-3
    assert np.abs(a - b).max() < 1e-9


def test_first_frame_ignored_until_projection_trains(rng):
    z, text, deltas = story_inputs(rng, n=4)
    sc = randomize_except(tiny_model(mode="sc"), ".inject.", seed=3)
    a = sc.eps(z[:, 1:], 300, text, first_frame=z[:, 0], deltas=deltas)
    b = sc.eps(z[:, 1:], 300, text, first_frame=rng.standard_normal(z[:, 0].shape), deltas=deltas)
    assert np.array_equal(a, b)
    randomize_except(sc, "-", seed=4)
    c = sc.eps(z[:, 1:], 300, text, first_frame=z[:, 0], deltas=deltas)
    d = sc.eps(z[:, 1:], 300, text, first_frame=rng.standard_normal(z[:, 0].shape), deltas=deltas)
    assert not np.allclose(c, d)


def test_dropped_storyline_equals_unconditional(rng):
    m = randomize_except(tiny_model(), "storyflow", seed=3)
    z, text, deltas = story_inputs(rng)
    dropped = m(z, np.array([100]), text, deltas, drop=np.array([True])).data
    uncond = m(z, np.array([100]), None, deltas).data
    np.testing.assert_allclose(dropped, uncond, atol=1e-12)


def test_inference_uses_storyflow_mean(rng):
    m = randomize_except(tiny_model(), "-", seed=4)
    z, text, deltas = story_inputs(rng)
    with pytest.raises(ValueError):
        m.eps(z, 10, text)
    m.stats.update(deltas)
    np.testing.assert_array_equal(m.eps(z, 10, text), m.eps(z, 10, text, deltas=deltas))


def test_storyline_shape_checked(rng):
    m = tiny_model()
    z, text, deltas = story_inputs(rng)
    with pytest.raises(ShapeError):
        m.eps(z, 10, text[:, :2], deltas=deltas)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = tiny_model(seed=3)
    m.stats.update(np.array([[1.0, 2.0]]))
    save_tensors(tmp_path / "m.swck", m.checkpoint_state())
    fresh = tiny_model(seed=9)
    fresh.load_checkpoint_state(load_tensors(tmp_path / "m.swck"))
    # payload is float32
    for (name, a), (_, b) in zip(m.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32), err_msg=name)
    z, text, deltas = story_inputs(rng)
    np.testing.assert_allclose(fresh.eps(z, 50, text), m.eps(z, 50, text), atol=1e-5)
    assert fresh.stats.count == 1


def test_generated_frames():
    assert tiny_model().generated_frames(5) == 5
    assert tiny_model(mode="sc").generated_frames(5) == 4


def test_width_mismatch_rejected():
    cfg = tiny_model_config()
    with pytest.raises(ValueError):
        dataclasses.replace(cfg, sc=dataclasses.replace(cfg.sc, dim=16))
