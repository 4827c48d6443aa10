"""Procedural sprite stories, the invertible toy latent codec and the toy text embedder."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FRAMES = 5
IMAGE_SIZE = 32
TOKENS_PER_SENTENCE = 4
JUMP_PROB = 0.3
JUMP_MIN_DISTANCE = IMAGE_SIZE // 2
SPRITE_SIZES = (6, 7, 8, 9, 10)

PALETTE = np.array(
    [
        [0.875, 0.125, 0.125],  # red
        [0.125, 0.75, 0.25],  # green
        [0.125, 0.25, 0.875],  # blue
        [0.9375, 0.875, 0.125],  # yellow
        [0.875, 0.125, 0.75],  # magenta
        [0.125, 0.75, 0.875],  # cyan
    ],
    dtype=np.float32,
)
BACKGROUNDS = np.array([[0.25, 0.25, 0.25], [0.5, 0.5, 0.5], [0.375, 0.3125, 0.25]], dtype=np.float32)

ACTIONS = ("appear", "stay", "walk", "jump")
CHAR_OFFSET = 0
ACTION_OFFSET = CHAR_OFFSET + len(PALETTE)
POS_OFFSET = ACTION_OFFSET + len(ACTIONS)
COUNT_OFFSET = POS_OFFSET + 9
VOCAB_SIZE = COUNT_OFFSET + 3


# ---- latent codec ----------------------------------------------------------
def encode(images) -> np.ndarray:
    """Pixels (..., 3, H, W) in [0, 1] -> latents (..., 12, H/2, W/2) in [-1, 1] (space-to-depth)."""
    x = np.asarray(images, dtype=np.float64) * 2.0 - 1.0
    *lead, c, h, w = x.shape
    x = x.reshape(*lead, c, h // 2, 2, w // 2, 2)
    nd = len(lead)
    x = x.transpose(*range(nd), nd, nd + 2, nd + 4, nd + 1, nd + 3)
    return x.reshape(*lead, c * 4, h // 2, w // 2)


def decode(latents) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    *lead, c4, h, w = z.shape
    c = c4 // 4
    nd = len(lead)
    z = z.reshape(*lead, c, 2, 2, h, w)
    z = z.transpose(*range(nd), nd, nd + 3, nd + 1, nd + 4, nd + 2)
    return (z.reshape(*lead, c, h * 2, w * 2) + 1.0) / 2.0


# ---- text ------------------------------------------------------------------
class ToyTextEmbedder:
    """Fixed embedding table with orthonormal rows, one per token id."""

    def __init__(self, vocab: int = VOCAB_SIZE, dim: int = 32, seed: int = 0):
        if vocab > dim:
            raise ValueError(f"orthonormal rows need dim >= vocab ({dim} < {vocab})")
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        self.table = q[:vocab].copy()
        self.dim = dim

    def __call__(self, tokens) -> np.ndarray:
        return self.table[np.asarray(tokens, dtype=np.intp)]


# ---- stories ---------------------------------------------------------------
@dataclass
class ToyStory:
    frames: np.ndarray  # (5, 3, 32, 32) float32 in [0, 1]
    tokens: np.ndarray  # (5, 4) token ids
    seed: int = -1
    actions: np.ndarray | None = field(default=None, repr=False)  # (sprites, 4) transitions

    @property
    def latents(self) -> np.ndarray:
        return encode(self.frames)


def _position_bucket(y: int, x: int, size: int) -> int:
    cy, cx = y + size / 2, x + size / 2
    return int(min(cy * 3 // IMAGE_SIZE, 2) * 3 + min(cx * 3 // IMAGE_SIZE, 2))


def _jump_target(rng, y, x, size):
    hi = IMAGE_SIZE - size
    while True:
        ny, nx = rng.integers(0, hi + 1, size=2)
        if abs(ny - y) + abs(nx - x) >= JUMP_MIN_DISTANCE:
            return int(ny), int(nx)


def make_story(seed: int, n_frames: int = N_FRAMES) -> ToyStory:
    rng = np.random.default_rng(seed)
    n_sprites = int(rng.integers(1, 4))
    colors = rng.choice(len(PALETTE), size=n_sprites, replace=False)
    sizes = rng.choice(SPRITE_SIZES, size=n_sprites, replace=False)
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    pos = np.array([[rng.integers(0, IMAGE_SIZE - s + 1), rng.integers(0, IMAGE_SIZE - s + 1)] for s in sizes])
    positions = [pos.copy()]
    actions = np.zeros((n_sprites, n_frames - 1), dtype=np.int64)
    for t in range(1, n_frames):
        for s in range(n_sprites):
            size = int(sizes[s])
            y, x = pos[s]
            if rng.random() < JUMP_PROB:
                pos[s] = _jump_target(rng, y, x, size)
                actions[s, t - 1] = 3
            elif rng.random() < 0.5:
                actions[s, t - 1] = 1
            else:
                dy, dx = rng.integers(-3, 4, size=2)
                pos[s] = np.clip([y + dy, x + dx], 0, IMAGE_SIZE - size)
                actions[s, t - 1] = 2
        positions.append(pos.copy())

    order = np.argsort(-sizes, kind="stable")  # large sprites first, small ones drawn on top
    frames = np.empty((n_frames, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    tokens = np.empty((n_frames, TOKENS_PER_SENTENCE), dtype=np.int64)
    for t in range(n_frames):
        img = np.broadcast_to(background[:, None, None], (3, IMAGE_SIZE, IMAGE_SIZE)).copy()
        for s in order:
            y, x = positions[t][s]
            size = sizes[s]
            img[:, y : y + size, x : x + size] = PALETTE[colors[s]][:, None, None]
        frames[t] = img
        if t == 0:
            focal, action = int(np.argmax(sizes)), 0
        else:
            moved = np.abs(positions[t] - positions[t - 1]).sum(axis=1)
            focal = int(np.argmax(moved))
            action = int(actions[focal, t - 1])
        y, x = positions[t][focal]
        tokens[t] = [
            CHAR_OFFSET + colors[focal],
            ACTION_OFFSET + action,
            POS_OFFSET + _position_bucket(y, x, int(sizes[focal])),
            COUNT_OFFSET + n_sprites - 1,
        ]
    return ToyStory(frames=frames, tokens=tokens, seed=seed, actions=actions)


def generate_toy_dataset(n_stories: int, seed: int = 0, n_frames: int = N_FRAMES) -> list[ToyStory]:
    if n_stories < 1:
        raise ValueError("need at least one story")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_stories)
    return [make_story(int(s), n_frames) for s in seeds]


def jump_fraction(stories) -> float:
    acts = np.concatenate([s.actions.reshape(-1) for s in stories])
    return float(np.mean(acts == 3))


def stack_latents(stories) -> np.ndarray:
    return np.stack([s.latents for s in stories])


def stack_tokens(stories) -> np.ndarray:
    return np.stack([s.tokens for s in stories])


# ---- dataset cache ---------------------------------------------------------
CACHE_MAGIC = b"SWDS"
CACHE_VERSION = 1


def save_dataset(path, stories) -> None:
    first = stories[0]
    n, c, h, w = first.frames.shape
    l = first.tokens.shape[1]
    chunks = [CACHE_MAGIC, struct.pack("<7I", CACHE_VERSION, len(stories), n, c, h, w, l)]
    for s in stories:
        chunks.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(s.tokens, dtype="<u2").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> list[ToyStory]:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a story cache (bad magic)")
    version, count, n, c, h, w, l = struct.unpack_from("<7I", buf, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    off = 4 + 28
    fsize, tsize = n * c * h * w, n * l
    stories = []
    for _ in range(count):
        frames = np.frombuffer(buf, "<f4", fsize, off).reshape(n, c, h, w).astype(np.float32)
        off += 4 * fsize
        tokens = np.frombuffer(buf, "<u2", tsize, off).reshape(n, l).astype(np.int64)
        off += 2 * tsize
        stories.append(ToyStory(frames=frames, tokens=tokens))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return stories
