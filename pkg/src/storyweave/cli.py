"""storyweave command line: train, sample, continue, ablate, gradcheck, inspect."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import capture_attention
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import Config, ConfigError, load_config, parse_text
from .data import decode, encode, generate_toy_dataset, load_dataset, make_story, save_dataset, stack_latents, stack_tokens
from .diffusion import NoiseSchedule, SamplerConfig, sample
from .metrics import eval_consistency
from .model import ModelConfig, StoryDiffusionModel
from .ppm import grid, read_ppm, write_ppm
from .training import TrainConfig, eval_loss, train


class CommandError(Exception):
    pass


# ---- shared helpers --------------------------------------------------------
def resolve_config(args) -> Config:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    flag_keys = {"seed": "seed", "iters": "train.iters", "steps": "sampler.steps", "guidance": "sampler.guidance",
                 "mode": "unet.mode"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def build_model(cfg: Config) -> StoryDiffusionModel:
    T.set_default_dtype(cfg["model.dtype"])
    model = StoryDiffusionModel(ModelConfig.from_config(cfg))
    return model.init_weights(cfg["seed"])


def schedule_for(cfg: Config) -> NoiseSchedule:
    return NoiseSchedule.from_config(cfg)


def make_out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"output directory {out} is not writable: {exc}") from None
    return out


def load_stories(cfg: Config, out: Path | None = None):
    cache = cfg["data.cache"]
    if cache:
        path = Path(cache)
        if not path.is_file():
            raise CommandError(f"dataset cache not found: {path}")
        stories = load_dataset(path)
    else:
        stories = generate_toy_dataset(cfg["data.stories"], cfg["data.seed"])
    if cfg["data.image_size"] != stories[0].frames.shape[-1]:
        raise ConfigError(f"data.image_size: {cfg['data.image_size']} does not match stories of "
                          f"size {stories[0].frames.shape[-1]}")
    return stories


def load_run(checkpoint) -> tuple[Config, StoryDiffusionModel]:
    """Rebuild a model from a checkpoint and the config.txt stored next to it."""
    ckpt = Path(checkpoint)
    cfg_path = ckpt.parent / "config.txt"
    if not cfg_path.is_file():
        raise CommandError(f"no config.txt next to checkpoint {ckpt}")
    state = load_tensors(ckpt)
    cfg = Config(parse_text(cfg_path.read_text(), str(cfg_path)))
    model = build_model(cfg)
    model.load_checkpoint_state(state)
    return cfg, model


def parse_tokens(spec: str) -> np.ndarray:
    """'c,a,p,n; c,a,p,n; ...' -> (n, 4) token ids."""
    rows = [r for r in spec.split(";") if r.strip()]
    try:
        return np.array([[int(v) for v in r.replace(",", " ").split()] for r in rows], dtype=np.int64)
    except ValueError:
        raise CommandError(f"cannot parse storyline tokens {spec!r}") from None


def storyline_tokens(args) -> np.ndarray:
    if getattr(args, "tokens", None):
        return parse_tokens(args.tokens)
    return make_story(args.story_seed).tokens


def save_frames(out: Path, frames, prefix: str = "frame") -> None:
    for i, f in enumerate(frames, 1):
        write_ppm(out / f"{prefix}_{i}.ppm", f)
    write_ppm(out / f"{prefix}_grid.ppm", grid(frames))


def dump_attention(directory, records) -> Path:
    """Write captured attention maps as one checkpoint-format file, keys ``<layer>.<call index>``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {f"{name}.{i:04d}": np.asarray(w) for i, (name, w) in enumerate(records)}
    path = d / "attention.swck"
    save_tensors(path, tensors)
    return path


# ---- commands --------------------------------------------------------------
def fit(cfg: Config, stories, out: Path | None = None, quiet: bool = False):
    """Train a fresh model on ``stories``; with ``out``, write checkpoints and loss.log there."""
    model = build_model(cfg)
    z0 = stack_latents(stories)
    text = model.embed_tokens(stack_tokens(stories))
    if model.cfg.continuation and model.cfg.unet.in_channels != z0.shape[2]:
        raise ConfigError("latent channels do not match the UNet input")
    tcfg = TrainConfig.from_config(cfg)
    schedule = schedule_for(cfg)
    log_lines = []
    every = cfg["train.checkpoint_every"]

    def log(step, loss, ema):
        log_lines.append(f"{step} {loss:.8f} {ema:.8f}")
        if not quiet and (step % 25 == 0 or step == tcfg.iters):
            print(f"step {step} loss {loss:.5f} ema {ema:.5f}", flush=True)

    def on_step(step):
        if out is not None and every and step % every == 0 and step < tcfg.iters:
            save_tensors(out / f"checkpoint_{step:06d}.swck", model.checkpoint_state())

    losses = train(model, z0, text, tcfg, schedule, log=log, on_step=on_step)
    if out is not None:
        (out / "loss.log").write_text("\n".join(log_lines) + "\n")
        save_tensors(out / "model.swck", model.checkpoint_state())
    return model, losses, z0, text


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = make_out_dir(args.out)
    cfg.save(out / "config.txt")
    stories = load_stories(cfg, out)
    model, losses, z0, text = fit(cfg, stories, out)
    final = eval_loss(model, z0, text, schedule_for(cfg), ratio=cfg["sampler.mixed_noise_ratio"])
    summary = {"iters": len(losses), "final_loss": losses[-1] if losses else None, "eval_loss": final,
               "storyflow_mean": model.stats.mean.tolist() if model.stats.mean is not None else None}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    print(f"final_loss={summary['final_loss']}")
    print(f"eval_loss={final:.6f}")
    print(f"checkpoint={out / 'model.swck'}")
    return 0


def _generate(model, cfg, text, rng, first_frame=None):
    scfg = SamplerConfig.from_config(cfg)
    return sample(model, text, scfg, schedule_for(cfg), rng, first_frame=first_frame)


def cmd_sample(args) -> int:
    cfg, model = load_run(args.checkpoint)
    if model.cfg.continuation:
        raise CommandError("continuation checkpoint: use the `continue` command")
    cfg.update({k: v for k, v in {"sampler.steps": args.steps, "sampler.guidance": args.guidance}.items()
                if v is not None})
    out = make_out_dir(args.out)
    tokens = storyline_tokens(args)
    if args.frames is not None and args.frames != len(tokens):
        raise CommandError(f"storyline has {len(tokens)} sentences but {args.frames} frames were requested")
    text = model.embed_tokens(tokens)[None]
    rng = np.random.default_rng(cfg["seed"] if args.seed is None else args.seed)
    with capture_attention() as records:
        z = _generate(model, cfg, text, rng)
    if args.dump_attn:
        dump_attention(args.dump_attn, records)
    frames = decode(z[0])
    save_frames(out, frames)
    np.save(out / "latents.npy", z[0])
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_continue(args) -> int:
    cfg, model = load_run(args.checkpoint)
    if not model.cfg.continuation:
        raise CommandError("visualization-mode checkpoint cannot continue a story; train with --mode sc")
    cfg.update({k: v for k, v in {"sampler.steps": args.steps, "sampler.guidance": args.guidance}.items()
                if v is not None})
    out = make_out_dir(args.out)
    try:
        first = read_ppm(args.first_frame)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    size = model.cfg.latent_size * 2
    if first.shape != (3, size, size):
        raise CommandError(f"first frame {args.first_frame} is {first.shape[2]}x{first.shape[1]}, expected {size}x{size}")
    tokens = storyline_tokens(args)
    text = model.embed_tokens(tokens)[None]
    z1 = encode(first)
    rng = np.random.default_rng(cfg["seed"] if args.seed is None else args.seed)
    with capture_attention() as records:
        rest = _generate(model, cfg, text, rng, first_frame=z1[None])
    if args.dump_attn:
        dump_attention(args.dump_attn, records)
    frames = np.concatenate([decode(z1)[None], decode(rest[0])], axis=0)
    save_frames(out, frames)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


ABLATION_ROWS = (
    ("full", {}),
    ("-storyflow", {"storyflow.enabled": False}),
    ("-storyflow-sc", {"storyflow.enabled": False, "sc.enabled": False}),
    ("-storyflow-sc-seta", {"storyflow.enabled": False, "sc.enabled": False, "unet.k": 1}),
    ("-storyflow-sc-seta-tconv", {"storyflow.enabled": False, "sc.enabled": False, "unet.k": 1,
                                  "unet.temporal_conv": False}),
    ("sc:full", {"sc.variant": "full"}),
    ("sc:simplified", {"sc.variant": "simplified"}),
    ("sc:dual", {"sc.variant": "dual"}),
    ("sc:causal", {"sc.variant": "causal"}),
)


def run_ablation(cfg: Config, seeds, stories, sample_eval: bool = True, log=print) -> list[dict]:
    """Train every ladder row for every seed; returns one record per (row, seed)."""
    records = []
    done: dict = {}
    for name, changes in ABLATION_ROWS:
        for seed in seeds:
            row_cfg = Config(dict(cfg))
            row_cfg.update(changes)
            row_cfg["seed"] = seed
            key = tuple(sorted((k, str(v)) for k, v in row_cfg.items()))
            if key in done:  # e.g. "sc:full" is the same network as "full"
                rec = dict(done[key], row=name)
                records.append(rec)
                continue
            t0 = time.time()
            model, losses, z0, text = fit(row_cfg, stories, quiet=True)
            rec = {"row": name, "seed": seed, "final_loss": losses[-1],
                   "eval_loss": eval_loss(model, z0, text, schedule_for(row_cfg)),
                   "finite": bool(np.all(np.isfinite(losses)))}
            if sample_eval:
                rng = np.random.default_rng(seed)
                if model.cfg.continuation:
                    gen = _generate(model, row_cfg, text, rng, first_frame=z0[:, 0])
                    ref = z0[:, 1:]
                else:
                    gen = _generate(model, row_cfg, text, rng)
                    ref = z0
                m = eval_consistency(gen, ref)
                rec.update(mse=m.mse, color_accuracy=m.color_accuracy, profile_distance=m.profile_distance)
            rec["seconds"] = round(time.time() - t0, 1)
            done[key] = rec
            records.append(rec)
            log(f"{name:26s} seed={seed} eval_loss={rec['eval_loss']:.5f} ({rec['seconds']}s)")
    return records


def ablation_table(records, seeds) -> tuple[str, list[str]]:
    rows = [name for name, _ in ABLATION_ROWS]
    by = {(r["row"], r["seed"]): r for r in records}
    header = f"{'row':26s} " + " ".join(f"{'seed ' + str(s):>10s}" for s in seeds) + f" {'mean':>10s}"
    extra = any("mse" in r for r in records)
    if extra:
        header += f" {'mse':>9s} {'color_acc':>9s} {'profile':>9s}"
    lines = [header]
    for name in rows:
        vals = [by[(name, s)]["eval_loss"] for s in seeds]
        line = f"{name:26s} " + " ".join(f"{v:10.5f}" for v in vals) + f" {np.mean(vals):10.5f}"
        if extra:
            recs = [by[(name, s)] for s in seeds]
            line += (f" {np.mean([r['mse'] for r in recs]):9.4f} {np.mean([r['color_accuracy'] for r in recs]):9.3f}"
                     f" {np.mean([r['profile_distance'] for r in recs]):9.3f}")
        lines.append(line)
    warnings = []
    for name in rows[1:5]:
        wins = sum(by[("full", s)]["eval_loss"] <= by[(name, s)]["eval_loss"] for s in seeds)
        if wins * 3 < 2 * len(seeds):
            warnings.append(f"warning: full variant beat {name} on only {wins} of {len(seeds)} seeds")
    return "\n".join(lines), warnings


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = make_out_dir(args.out)
    cfg.save(out / "config.txt")
    if not cfg["data.cache"]:
        cache = out / "stories.swds"
        if not cache.is_file():
            save_dataset(cache, generate_toy_dataset(cfg["data.stories"], cfg["data.seed"]))
        cfg["data.cache"] = str(cache)
    stories = load_stories(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    records = run_ablation(cfg, seeds, stories, sample_eval=not args.no_sample)
    diverged = [r for r in records if not r["finite"]]
    table, warnings = ablation_table(records, seeds)
    (out / "ablation.txt").write_text(table + "\n" + "".join(w + "\n" for w in warnings))
    (out / "ablation.json").write_text(json.dumps(records, indent=2))
    print(table)
    for w in warnings:
        print(w)
    if diverged:
        print(f"diverged rows: {sorted({r['row'] for r in diverged})}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, kernel_suite

    if args.checkpoint:
        load_tensors(args.checkpoint)  # validates the file; errors name it
    seeds = [int(s) for s in args.seeds.split(",")]
    failed = False
    for seed in seeds:
        for report in kernel_suite(seed, include_model=not args.kernels_only):
            status = "ok" if report.ok else "FAIL"
            failed |= not report.ok
            print(f"seed={seed} {report.name:28s} max_rel_err={report.max_error:.3e} {status}", flush=True)
    print(f"gradcheck {'FAILED' if failed else 'passed'} (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    state = load_tensors(args.checkpoint)
    total = 0
    print(f"{'name':60s} {'shape':>18s} {'numel':>9s} {'mean':>11s} {'std':>11s}")
    for name, arr in state.items():
        total += arr.size
        print(f"{name:60s} {str(tuple(arr.shape)):>18s} {arr.size:9d} {arr.mean():11.4e} {arr.std():11.4e}")
    print(f"{len(state)} tensors, {total} values")
    return 0


# ---- argument parsing ------------------------------------------------------
def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run", help="output directory")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale (default 7.5)")
    p.add_argument("--story-seed", type=int, default=0, help="describe the toy story with this seed")
    p.add_argument("--tokens", help="explicit storyline 'c,a,p,n; ...' (one group per sentence)")
    p.add_argument("--dump-attn", metavar="DIR", help="save captured attention maps to DIR/attention.swck")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storyweave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on toy stories")
    _common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--mode", choices=("sv", "sc"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a story from a checkpoint")
    _common(p, config=False)
    _sampling(p)
    p.add_argument("--frames", type=int, help="expected frame count (checked against the storyline)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("continue", help="generate frames 2..N from a given first frame")
    _common(p, config=False)
    _sampling(p)
    p.add_argument("--first-frame", required=True, help="PPM image of the first frame")
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("ablate", help="train the ablation ladder and compare")
    _common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("sv", "sc"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--no-sample", action="store_true", help="skip the sampling metrics")
    p.set_defaults(func=cmd_ablate, guidance=1.0)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and a tiny model")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--kernels-only", action="store_true")
    p.add_argument("--checkpoint", help="also verify that this checkpoint loads")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print the tensor table of a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CommandError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
