"""Central finite-difference checks of the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-3
FLOOR = 1e-6


def rel_error(a: float, b: float, floor: float = FLOOR) -> float:
    return abs(a - b) / max(abs(a) + abs(b), floor)


@dataclass
class GradReport:
    name: str
    errors: dict = field(default_factory=dict)  # tensor name -> max relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def check_gradients(fn, tensors: dict, name: str = "fn", coords: int = 3, seed: int = 0, eps: float = STEP,
                    directions: int = 1) -> GradReport:
    """Compare backprop gradients of the scalar ``fn()`` with central differences.

    ``tensors`` maps names to leaf Tensors that ``fn`` reads. Each is probed along
    random directions and at its ``coords`` largest-gradient coordinates. Runs in float64.
    """
    rng = np.random.default_rng(seed)
    report = GradReport(name)
    if not tensors:
        return report
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        for t in tensors.values():
            t.data = np.asarray(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None
        loss = fn()
        loss.backward()
        grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

        def f() -> float:
            with T.no_grad():
                return float(fn().data)

        for key, t in tensors.items():
            worst = 0.0
            probes = [rng.standard_normal(t.shape) for _ in range(directions)]
            # coordinates with the largest analytic gradient; near-zero ones only measure roundoff
            flat = np.argsort(-np.abs(grads[key]).reshape(-1), kind="stable")[:coords]
            for i in flat:
                e = np.zeros(t.data.size)
                e[i] = 1.0
                probes.append(e.reshape(t.shape))
            for u in probes:
                base = t.data.copy()
                t.data = base + eps * u
                up = f()
                t.data = base - eps * u
                down = f()
                t.data = base
                numeric = (up - down) / (2 * eps)
                analytic = float((grads[key] * u).sum())
                worst = max(worst, rel_error(numeric, analytic))
            report.errors[key] = worst
    finally:
        T.set_default_dtype(old)
    return report


def randomize_parameters(module, seed: int = 0, scale: float = 0.2) -> None:
    """Give every parameter a random float64 value, so zero-initialised layers carry gradient."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = scale * rng.standard_normal(p.shape)


def check_module(module, loss_fn, name: str, seed: int = 0, coords: int = 2, randomize: bool = True) -> GradReport:
    """Gradcheck every parameter of ``module`` through ``loss_fn()``."""
    if randomize:
        randomize_parameters(module, seed)
    params = dict(module.named_parameters())
    return check_gradients(loss_fn, params, name=name, coords=coords, seed=seed)


def projected_loss(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar <out, r> with a fixed random r; avoids the symmetric cancellations of plain sums."""
    r = np.random.default_rng(seed + 7919).standard_normal(out.shape)
    return T.tsum(out * Tensor(r))


# ---- the suite run by `storyweave gradcheck` --------------------------------
def smallest_model_config(mode: str = "sv", first_frame: str = "conv"):
    from .contextualizer import ContextualizerConfig
    from .model import ModelConfig
    from .unet import UNetConfig

    unet = UNetConfig(base_channels=8, mults=(1, 2), heads=2, groups=2, context_dim=8, mode=mode,
                      first_frame=first_frame)
    sc = ContextualizerConfig(dim=8, layers=2, heads=2)
    return ModelConfig(unet=unet, sc=sc, latent_size=4)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _model_check(name, cfg, seed):
    from .model import StoryDiffusionModel

    rng = np.random.default_rng(seed)
    model = StoryDiffusionModel(cfg)
    n, l, d = 3, 2, cfg.text_dim
    frames = n - 1 if cfg.continuation else n
    z = rng.standard_normal((1, frames) + model.frame_shape)
    text = rng.standard_normal((1, n, l, d))
    deltas = np.abs(rng.standard_normal((1, n - 1)))
    first = rng.standard_normal((1,) + model.frame_shape) if cfg.continuation else None
    return check_module(model, lambda: projected_loss(model(z, np.array([400]), text, deltas, first), seed),
                        name, seed=seed, coords=1)


def kernel_suite(seed: int = 0, include_model: bool = True) -> list[GradReport]:
    from . import attention as A
    from .contextualizer import ContextualizerConfig, StorylineContextualizer
    from .storyflow import StoryFlowAdapter

    rng = np.random.default_rng(seed)
    reports = []

    def run(name, fn, **tensors):
        reports.append(check_gradients(lambda: projected_loss(fn(), seed), tensors, name=name, seed=seed))

    x, w, bias = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    run("conv2d.zeros", lambda: T.conv2d(x, w, bias), x=x, w=w, bias=bias)
    run("conv2d.replicate.stride2", lambda: T.conv2d(x, w, bias, stride=2, padding="replicate"), x=x, w=w)
    s, wt = _leaf(rng, 6, 3, 4), _leaf(rng, 3, 3, 3)
    run("conv1d_temporal", lambda: T.conv1d_temporal(s, wt), x=s, w=wt)
    g, gw, gb = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4)
    run("group_norm", lambda: T.group_norm(g, 2, gw, gb), x=g, weight=gw, bias=gb)
    ln, lw = _leaf(rng, 3, 5, 6), _leaf(rng, 6)
    run("layer_norm", lambda: T.layer_norm(ln, lw), x=ln, weight=lw)
    e = _leaf(rng, 4, 7)
    run("gelu.silu", lambda: T.gelu(e) + T.silu(e), x=e)
    sm = _leaf(rng, 2, 5, 5)
    run("softmax.masked", lambda: T.softmax(sm, axis=-1, mask=np.tril(np.ones((5, 5), bool))), x=sm)
    rz = _leaf(rng, 2, 4, 3, 3)
    run("resize_nearest", lambda: T.resize_nearest(rz, (5, 2)), x=rz)
    ro = _leaf(rng, 2, 5, 2, 4)
    run("rope_rotate", lambda: A.rope_rotate(ro, np.arange(5), axis=1), x=ro)

    c, heads = 8, 2
    z = _leaf(rng, 1, 3, c, 4, 4)
    wq, wk, wv, wo, bo = (_leaf(rng, c, c, scale=0.4) for _ in range(5))
    bo = _leaf(rng, c)
    run("seta.k3", lambda: A.seta_attention(z, wq, wk, wv, wo, bo, heads=heads, k=3), z=z, wq=wq, wk=wk, wv=wv,
        wo=wo, bo=bo)
    run("vanilla_temporal", lambda: A.vanilla_temporal_attention(z, wq, wk, wv, wo, heads=heads), z=z, wq=wq)
    run("spatial_self_attention", lambda: A.spatial_self_attention(z, wq, wk, wv, wo, heads=heads), z=z, wk=wk)
    ctx = _leaf(rng, 1, 3, 2, 6)
    ck, cv = _leaf(rng, 6, c, scale=0.4), _leaf(rng, 6, c, scale=0.4)
    run("aligned_cross_attention", lambda: A.temporally_aligned_cross_attention(z, ctx, wq, ck, cv, wo, heads=heads),
        z=z, ctx=ctx, wq=wq, wk=ck, wv=cv)
    tok = _leaf(rng, 2, 6, c)
    run("multihead.causal.rope", lambda: A.multihead_attention(
        tok, tok, wq, wk, wv, wo, heads=heads, mask=np.tril(np.ones((6, 6), bool)), positions=np.arange(6)),
        x=tok, wq=wq, wv=wv)

    for variant in ("full", "simplified", "dual", "causal"):
        sc = StorylineContextualizer(ContextualizerConfig(dim=8, layers=2, variant=variant, heads=2))
        inp = rng.standard_normal((1, 3, 2, 8))
        reports.append(check_module(sc, lambda: projected_loss(sc(Tensor(inp)), seed), f"contextualizer.{variant}",
                                    seed=seed))
    adapter = StoryFlowAdapter(8, freq_dim=6)
    deltas = np.abs(rng.standard_normal((2, 4)))
    reports.append(check_module(adapter, lambda: projected_loss(adapter.embed(deltas, 5), seed), "storyflow_adapter",
                                seed=seed))
    if include_model:
        reports.append(_model_check("model.sv", smallest_model_config("sv"), seed))
        reports.append(_model_check("model.sc.conv", smallest_model_config("sc"), seed))
    return reports
