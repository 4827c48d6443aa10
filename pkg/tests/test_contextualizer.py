import numpy as np
import pytest

from storyweave.contextualizer import VARIANTS, ContextualizerConfig, StorylineContextualizer, contextualize_variant
from storyweave.gradcheck import randomize_parameters
from storyweave.tensor import ShapeError, Tensor


@pytest.mark.parametrize("variant", VARIANTS)
def test_identity_at_init(rng, variant):
    sc = StorylineContextualizer(ContextualizerConfig(dim=16, layers=3, variant=variant, heads=4)).init_weights(1)
    c = rng.standard_normal((2, 5, 4, 16))
    assert np.array_equal(sc(Tensor(c)).data, c)


def test_alias_for_dual():
    assert ContextualizerConfig(variant="dual_self_attention").variant == "dual"
    with pytest.raises(ValueError):
        ContextualizerConfig(variant="bidirectional")


def test_only_final_head_is_zero():
    sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=2, heads=2)).init_weights(0)
    params = dict(sc.named_parameters())
    assert not params["layers.1.ffn2.fc2.weight"].data.any()
    assert params["layers.0.ffn2.fc2.weight"].data.any()


def test_variant_layouts_differ():
    counts = {v: StorylineContextualizer(ContextualizerConfig(dim=8, layers=1, variant=v, heads=2)).num_parameters()
              for v in VARIANTS}
    assert counts["simplified"] == counts["causal"] < counts["dual"] < counts["full"]


def test_causal_variant_ignores_later_sentences(rng):
    sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=2, variant="causal", heads=2))
    randomize_parameters(sc, seed=2, scale=0.3)
    c = rng.standard_normal((1, 4, 3, 8))
    c2 = c.copy()
    c2[0, 3] += rng.standard_normal((3, 8))
    a, b = sc(Tensor(c)).data, sc(Tensor(c2)).data
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.allclose(a[0, 3], b[0, 3])


@pytest.mark.parametrize("variant", ["full", "simplified", "dual"])
def test_trained_contextualizer_mixes_sentences(rng, variant):
    sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=2, variant=variant, heads=2))
    randomize_parameters(sc, seed=3, scale=0.3)
    c = rng.standard_normal((1, 4, 3, 8))
    c2 = c.copy()
    c2[0, 3] += rng.standard_normal((3, 8))
    assert not np.allclose(sc(Tensor(c)).data[0, 0], sc(Tensor(c2)).data[0, 0])


def test_batch_items_do_not_leak(rng):
    sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=2, heads=2))
    randomize_parameters(sc, seed=4, scale=0.3)
    c = rng.standard_normal((2, 3, 2, 8))
    both = sc(Tensor(c)).data
    for i in range(2):
        np.testing.assert_allclose(both[i], sc(Tensor(c[i : i + 1])).data[0], atol=1e-12)


def test_three_dim_input_and_shape_errors(rng):
    c = rng.standard_normal((3, 2, 8))
    assert np.array_equal(contextualize_variant(Tensor(c), "simplified", layers=1, heads=2).data, c)
    sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=1, heads=2))
    with pytest.raises(ShapeError):
        sc(Tensor(np.zeros((1, 3, 2, 6))))
