"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line and the
session summary repeats them under "acceptance criteria"."""

import contextlib
import time

import numpy as np
import pytest

from storyweave import attention as A
from storyweave.cli import ABLATION_ROWS, ablation_table, fit, run_ablation, schedule_for
from storyweave.config import load_config
from storyweave.contextualizer import VARIANTS, ContextualizerConfig, StorylineContextualizer
from storyweave.data import generate_toy_dataset
from storyweave.diffusion import NoiseSchedule, SamplerConfig, forward_diffuse, sample
from storyweave.gradcheck import TOLERANCE, kernel_suite, randomize_parameters
from storyweave.model import ModelConfig, StoryDiffusionModel
from storyweave.tensor import Tensor
from storyweave.training import eval_loss

from conftest import ACCEPTANCE_RESULTS, copy_shared, randomize_except


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.time()
    info = {}
    try:
        yield info
    except BaseException as exc:
        line = f"criterion {n} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE_RESULTS[n] = line + f" ({time.time() - t0:.1f}s)"
        print(ACCEPTANCE_RESULTS[n])
        raise
    detail = info.get("detail", "")
    ACCEPTANCE_RESULTS[n] = f"criterion {n} PASS  {title}" + (f": {detail}" if detail else "") + \
        f" ({time.time() - t0:.1f}s)"
    print(ACCEPTANCE_RESULTS[n])


def test_1_contextualizer_identity_at_init():
    with criterion(1, "storyline contextualizer is the identity at init") as info:
        rng = np.random.default_rng(1)
        worst = 0.0
        for variant in VARIANTS:
            sc = StorylineContextualizer(ContextualizerConfig(dim=32, layers=4, heads=4, variant=variant))
            sc.init_weights(int(rng.integers(1 << 30)))
            for _ in range(20):
                b, n, l = rng.integers(1, 3), rng.integers(1, 7), rng.integers(1, 6)
                c = rng.standard_normal((b, n, l, 32)) * rng.uniform(0.1, 10)
                worst = max(worst, float(np.abs(sc(Tensor(c)).data - c).max()))
        assert worst == 0.0, f"max deviation {worst}"
        info["detail"] = "max abs deviation 0.0 over 4 variants x 20 inputs"


def test_2_window_cardinality():
    with criterion(2, "SETA window holds (n-1)k^2+1 keys") as info:
        rng = np.random.default_rng(2)
        h, w, c = 5, 6, 4
        for n in range(1, 7):
            for k in (1, 3, 5):
                expected = (n - 1) * k * k + 1
                g = A.window_gather(n, h, w, k)
                assert g.n_lw == expected
                assert g.index.shape == (h * w, n, expected)
                # the kernel really attends over that many keys
                z = Tensor(rng.standard_normal((1, n, c, h, w)))
                ws = [Tensor(rng.standard_normal((c, c))) for _ in range(4)]
                with A.capture_attention() as records:
                    A.seta_attention(z, *ws, heads=2, k=k)
                (_, attn), = records
                assert attn.shape[-1] == expected, (n, k, attn.shape)
                np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)
        info["detail"] = "18 (n, k) pairs"


def test_3_vanilla_equivalence():
    with criterion(3, "SETA with k=1 is bit-identical to vanilla temporal attention") as info:
        rng = np.random.default_rng(3)
        for _ in range(50):
            heads = int(rng.choice([1, 2, 4]))
            c = heads * 2 * int(rng.integers(1, 4))
            b, n, h, w = (int(v) for v in rng.integers(1, 5, size=4))
            z = Tensor(rng.standard_normal((b, n, c, h, w)))
            ws = [Tensor(rng.standard_normal((c, c)) * 0.5) for _ in range(4)] + [Tensor(rng.standard_normal(c))]
            rope = bool(rng.integers(2))
            a = A.seta_attention(z, *ws, heads=heads, k=1, rope=rope).data
            v = A.vanilla_temporal_attention(z, *ws, heads=heads, rope=rope).data
            assert np.array_equal(a, v)
        info["detail"] = "50 random instances"


def test_4_gradient_fidelity():
    with criterion(4, "finite-difference gradient checks at fp64") as info:
        worst, count, failures = 0.0, 0, []
        for seed in (0, 1, 2):
            for r in kernel_suite(seed, include_model=True):
                count += 1
                worst = max(worst, r.max_error)
                if not r.ok:
                    failures.append(f"{r.name}@{seed}={r.max_error:.2e}")
        assert not failures, ", ".join(failures)
        info["detail"] = f"{count} checks over 3 seeds, max relative error {worst:.2e} < {TOLERANCE:g}"


def test_5_diffusion_statistics():
    with criterion(5, "forward diffusion moments") as info:
        s = NoiseSchedule.linear()
        rng = np.random.default_rng(5)
        x0 = 0.7
        for t in (1, s.T // 2, s.T):
            x = forward_diffuse(s, np.full(100_000, x0), t, rng.standard_normal(100_000))
            ab = s.alpha_bar(t)
            mean, var = np.sqrt(ab) * x0, 1 - ab
            # the mean is compared on the scale of the distribution; at t = T it is ~0.004 against unit noise
            assert abs(x.mean() - mean) <= 0.02 * max(abs(mean), np.sqrt(var)), (t, x.mean(), mean)
            assert abs(x.var() - var) <= 0.02 * var, (t, x.var(), var)
        info["detail"] = "t in {1, T/2, T}, 1e5 draws each"


def test_6_zero_impact_adapters():
    with criterion(6, "StoryFlow adapter and continuation conv leave the output unchanged at init") as info:
        rng = np.random.default_rng(6)
        base = ModelConfig()
        z = rng.standard_normal((1, 5) + (12, base.latent_size, base.latent_size))
        text = rng.standard_normal((1, 5, 4, base.text_dim))
        deltas = np.abs(rng.standard_normal((1, 4)))
        # residual branches start at zero, so the base network gets random weights first;
        # the adapters are then attached in their initial state
        plain = StoryDiffusionModel(ModelConfig(storyflow_enabled=False)).init_weights(0)
        randomize_except(plain, "contextualizer", seed=6, scale=0.1)
        with_sf = copy_shared(plain, StoryDiffusionModel(base).init_weights(0))
        out = plain.eps(z, 400, text)
        assert np.abs(out).max() > 1e-3
        d1 = np.abs(with_sf.eps(z, 400, text, deltas=deltas) - out).max()
        # continuation: same weights, zero 1x1 conv; frames 2..5 match the visualization model
        sc_cfg = ModelConfig.from_config(load_config(overrides={"unet.mode": "sc"}))
        sc = copy_shared(with_sf, StoryDiffusionModel(sc_cfg).init_weights(0))
        a = sc.eps(z[:, 1:], 400, text, first_frame=z[:, 0], deltas=deltas)
        b = with_sf.eps(z[:, 1:], 400, text[:, 1:], deltas=deltas[:, 1:])
        d2 = np.abs(a - b).max()
        # and with every other weight random, the first frame has no influence at all
        randomize_except(sc, ".inject.", seed=7, scale=0.1)
        a = sc.eps(z[:, 1:], 400, text, first_frame=z[:, 0], deltas=deltas)
        b = sc.eps(z[:, 1:], 400, text, first_frame=rng.standard_normal(z[:, 0].shape), deltas=deltas)
        d3 = np.abs(a - b).max()
        assert d1 < 1e-9 and d2 < 1e-9 and d3 < 1e-9, (d1, d2, d3)
        info["detail"] = f"storyflow {d1:.1e}, continuation {d2:.1e} / {d3:.1e}"


def test_7_aligned_cross_attention_isolation():
    with criterion(7, "zeroing sentence j only changes frame j") as info:
        rng = np.random.default_rng(7)
        c, d, n = 8, 6, 5
        block = A.SpatialTransformer(c, d, heads=2)
        randomize_parameters(block, seed=7, scale=0.4)
        ws = [Tensor(rng.standard_normal(s) * 0.5) for s in [(c, c), (d, c), (d, c), (c, c)]]
        z = Tensor(rng.standard_normal((2, n, c, 3, 4)))
        ctx = rng.standard_normal((2, n, 4, d))
        base_k = A.temporally_aligned_cross_attention(z, Tensor(ctx), *ws, heads=2).data
        base_b = block(z, Tensor(ctx)).data
        for j in range(n):
            ctx2 = ctx.copy()
            ctx2[:, j] = 0.0
            out_k = A.temporally_aligned_cross_attention(z, Tensor(ctx2), *ws, heads=2).data
            out_b = block(z, Tensor(ctx2)).data
            for i in range(n):
                same = np.array_equal(out_k[:, i], base_k[:, i]) and np.array_equal(out_b[:, i], base_b[:, i])
                assert same == (i != j), (i, j)
        info["detail"] = "kernel and transformer block, every j of 5"


# ---- training-based criteria ---------------------------------------------
def overfit_config(**extra):
    """The documented overfit recipe: config defaults at toy scale, one story, no condition dropout."""
    return load_config(overrides=dict({"data.stories": 1, "train.drop_prob": 0.0, "sampler.guidance": 1.0}, **extra))


def test_8_overfit_convergence():
    with criterion(8, "overfit one story: loss < 0.05 in 500 steps, DDIM reconstruction MAE < 0.1") as info:
        cfg = overfit_config()
        assert cfg["unet.base_channels"] == 32 and cfg["train.iters"] == 500
        stories = generate_toy_dataset(1, cfg["data.seed"])
        model, losses, z0, text = fit(cfg, stories, quiet=True)
        assert len(losses) == 500 and np.all(np.isfinite(losses))
        assert z0.shape == (1, 5, 12, 16, 16)
        loss = eval_loss(model, z0, text, schedule_for(cfg), ratio=cfg["sampler.mixed_noise_ratio"])
        x = sample(model, text, SamplerConfig.from_config(cfg), schedule_for(cfg), np.random.default_rng(0))
        mae = float(np.abs(x - z0).mean())
        info["detail"] = f"loss {loss:.4f}, MAE {mae:.4f}"
        print(info["detail"])
        assert loss < 0.05 and mae < 0.1, info["detail"]


# the 9-row x 3-seed ladder at full toy scale takes ~2.5 h here; 200 steps per run keeps it near 1 h
ABLATION_ITERS = 200


def test_9_ablation_ladder():
    with criterion(9, "ablation ladder trains all 9 rows deterministically") as info:
        cfg = overfit_config(**{"train.iters": ABLATION_ITERS})
        stories = generate_toy_dataset(1, cfg["data.seed"])
        seeds = [0, 1, 2]
        records = run_ablation(cfg, seeds, stories, log=lambda s: None)
        assert len(records) == 9 * 3
        assert {r["row"] for r in records} == {name for name, _ in ABLATION_ROWS}
        assert all(r["finite"] for r in records), "a row diverged"
        table, warnings = ablation_table(records, seeds)
        print(table)
        for w in warnings:
            print(w)
        # determinism: retraining a row from scratch reproduces its loss exactly
        by = {(r["row"], r["seed"]): r["eval_loss"] for r in records}
        model, _, z0, text = fit(cfg, stories, quiet=True)
        assert eval_loss(model, z0, text, schedule_for(cfg)) == by[("full", cfg["seed"])]
        wins = min(sum(by[("full", s)] <= by[(name, s)] for s in seeds) for name, _ in ABLATION_ROWS[1:5])
        info["detail"] = f"full beats each ablated row on >= {wins}/3 seeds" + \
            (f" (soft check, {len(warnings)} warning(s))" if warnings else "")


def test_10_continuation_contract(tmp_path):
    with criterion(10, "continue keeps the given first frame and depends on it") as info:
        from storyweave.cli import main
        from storyweave.data import make_story
        from storyweave.ppm import write_ppm

        from conftest import TINY

        run = tmp_path / "sc"
        sets = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")]
        assert main(["train", "--mode", "sc", "--iters", "10", "--seed", "0", "--out", str(run)] + sets) == 0
        write_ppm(tmp_path / "a.ppm", make_story(1).frames[0])
        write_ppm(tmp_path / "b.ppm", make_story(2).frames[0])
        outs = {}
        for name in ("a", "b"):
            out = tmp_path / f"out_{name}"
            assert main(["continue", "--checkpoint", str(run / "model.swck"), "--first-frame",
                         str(tmp_path / f"{name}.ppm"), "--seed", "3", "--out", str(out)]) == 0
            outs[name] = out
            assert (out / "frame_1.ppm").read_bytes() == (tmp_path / f"{name}.ppm").read_bytes()
        changed = [i for i in range(2, 6)
                   if (outs["a"] / f"frame_{i}.ppm").read_bytes() != (outs["b"] / f"frame_{i}.ppm").read_bytes()]
        assert changed == [2, 3, 4, 5], changed
        info["detail"] = "frame 1 byte-exact, frames 2-5 all change"
