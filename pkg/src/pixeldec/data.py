"""Procedural training corpus: parametric images with truthful captions.

Five generator families (gradients, stripes, checkers, blobs, glyph-like
marks) rendered from continuous parameters in normalized coordinates, so
the same sample can be drawn at any resolution. Captions are short token
sequences naming the family and the discrete parameters (colors, scale,
orientation) actually used by the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

GENERATOR_CLASSES = ("gradient", "stripes", "checker", "blobs", "glyphs")

_PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (-0.2, -0.2, -0.2),
}
_COLORS = list(_PALETTE)

_SCALES = ("fine", "medium", "coarse")
_ORIENTATIONS = ("horizontal", "vertical", "diagonal", "antidiagonal")
_ORIENT_ANGLE = {
    "horizontal": 0.0,
    "vertical": np.pi / 2,
    "diagonal": np.pi / 4,
    "antidiagonal": 3 * np.pi / 4,
}

PAD_WORD = "<pad>"
VOCABULARY: tuple[str, ...] = (
    (PAD_WORD,) + GENERATOR_CLASSES + tuple(_COLORS) + _SCALES + _ORIENTATIONS
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCABULARY)}
VOCAB_SIZE = len(VOCABULARY)
PAD_ID = 0
MAX_CAPTION_LEN = 8


def encode_caption(words: list[str]) -> list[int]:
    return [WORD_TO_ID[w] for w in words]


@dataclass
class SyntheticSample:
    image: torch.Tensor  # (3, H, W) in [-1, 1]
    caption_tokens: list[int]
    generator_class: str
    caption_words: list[str] = field(default_factory=list)


@dataclass
class Corpus:
    samples: list[SyntheticSample]
    seed: int
    buckets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SyntheticSample:
        return self.samples[i]

    def class_histogram(self) -> dict[str, int]:
        hist = {c: 0 for c in GENERATOR_CLASSES}
        for s in self.samples:
            hist[s.generator_class] += 1
        return hist


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.linspace(-1.0, 1.0, h, dtype=np.float64)
    xs = np.linspace(-1.0, 1.0, w, dtype=np.float64)
    return np.meshgrid(ys, xs, indexing="ij")


def _blend(mask: np.ndarray, fg: tuple, bg: tuple) -> np.ndarray:
    fg_arr = np.asarray(fg, dtype=np.float64)[:, None, None]
    bg_arr = np.asarray(bg, dtype=np.float64)[:, None, None]
    return bg_arr + (fg_arr - bg_arr) * mask[None]


def _render(params: dict, h: int, w: int) -> np.ndarray:
    yy, xx = _grid(h, w)
    kind = params["kind"]
    ca = _PALETTE[params["color_a"]]
    cb = _PALETTE[params["color_b"]]
    angle = _ORIENT_ANGLE.get(params.get("orientation", "horizontal"), 0.0)
    u = np.cos(angle) * xx + np.sin(angle) * yy

    if kind == "gradient":
        mask = 0.5 * (u - params["offset"] + 1.0)
        mask = np.clip(mask, 0.0, 1.0)
    elif kind == "stripes":
        freq = params["freq"]
        mask = 0.5 * (1.0 + np.tanh(3.0 * np.sin(np.pi * freq * (u + params["phase"]))))
    elif kind == "checker":
        freq = params["freq"]
        wave = np.sin(np.pi * freq * (xx + params["phase"])) * np.sin(
            np.pi * freq * (yy + params["phase2"])
        )
        mask = 0.5 * (1.0 + np.tanh(4.0 * wave))
    elif kind == "blobs":
        mask = np.zeros_like(xx)
        for cx, cy in params["centers"]:
            r2 = (xx - cx) ** 2 + (yy - cy) ** 2
            mask += np.exp(-r2 / (2.0 * params["radius"] ** 2))
        mask = np.clip(mask, 0.0, 1.0)
    elif kind == "glyphs":
        # Soft axis-aligned bar pairs resembling crosses / corners.
        mask = np.zeros_like(xx)
        sz = params["size"]
        thick = sz * 0.35
        for cx, cy, horiz in params["strokes"]:
            if horiz:
                inside = (np.abs(yy - cy) < thick) & (np.abs(xx - cx) < sz)
            else:
                inside = (np.abs(xx - cx) < thick) & (np.abs(yy - cy) < sz)
            mask = np.maximum(mask, inside.astype(np.float64))
        # soften edges slightly so tiny autoencoders can fit them
        mask = 0.25 * mask + 0.75 * _soft(mask)
    else:  # pragma: no cover - guarded by GENERATOR_CLASSES
        raise ValueError(f"unknown generator {kind}")
    return np.clip(_blend(mask, ca, cb), -1.0, 1.0)


def _soft(mask: np.ndarray) -> np.ndarray:
    # 3x3 box blur with edge replication
    padded = np.pad(mask, 1, mode="edge")
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out / 9.0


_SCALE_FREQ = {"fine": 4.0, "medium": 2.5, "coarse": 1.5}
_SCALE_RADIUS = {"fine": 0.18, "medium": 0.3, "coarse": 0.45}
_SCALE_SIZE = {"fine": 0.25, "medium": 0.4, "coarse": 0.6}


def _draw_params(rng: np.random.Generator) -> tuple[dict, list[str]]:
    kind = GENERATOR_CLASSES[int(rng.integers(len(GENERATOR_CLASSES)))]
    ia = int(rng.integers(len(_COLORS)))
    ib = int(rng.integers(len(_COLORS) - 1))
    if ib >= ia:  # distinct foreground/background, uniform over pairs
        ib += 1
    color_a, color_b = _COLORS[ia], _COLORS[ib]
    scale = _SCALES[int(rng.integers(len(_SCALES)))]
    orientation = _ORIENTATIONS[int(rng.integers(len(_ORIENTATIONS)))]
    params: dict = {
        "kind": kind,
        "color_a": color_a,
        "color_b": color_b,
        "orientation": orientation,
    }
    words = [kind, color_a, color_b]
    if kind == "gradient":
        params["offset"] = float(rng.uniform(-0.4, 0.4))
        words.append(orientation)
    elif kind == "stripes":
        params["freq"] = _SCALE_FREQ[scale]
        params["phase"] = float(rng.uniform(0.0, 1.0))
        words += [scale, orientation]
    elif kind == "checker":
        params["freq"] = _SCALE_FREQ[scale]
        params["phase"] = float(rng.uniform(0.0, 1.0))
        params["phase2"] = float(rng.uniform(0.0, 1.0))
        words.append(scale)
    elif kind == "blobs":
        k = int(rng.integers(1, 4))
        params["centers"] = [
            (float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6))) for _ in range(k)
        ]
        params["radius"] = _SCALE_RADIUS[scale]
        words.append(scale)
    else:  # glyphs
        k = int(rng.integers(1, 3))
        params["strokes"] = [
            (
                float(rng.uniform(-0.5, 0.5)),
                float(rng.uniform(-0.5, 0.5)),
                bool(rng.integers(2)),
            )
            for _ in range(2 * k)
        ]
        params["size"] = _SCALE_SIZE[scale]
        words.append(scale)
    return params, words


def generate_corpus(
    n: int,
    seed: int,
    buckets: list[tuple[int, int]] | tuple[tuple[int, int], ...] = ((32, 32),),
) -> Corpus:
    """Draw ``n`` captioned images, deterministic in ``seed``."""
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    buckets = tuple(tuple(b) for b in buckets)
    if len(buckets) == 0:
        raise ConfigError("bucket list must not be empty")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        h, w = buckets[int(rng.integers(len(buckets)))]
        params, words = _draw_params(rng)
        img = torch.from_numpy(_render(params, h, w).astype(np.float32))
        samples.append(
            SyntheticSample(
                image=img,
                caption_tokens=encode_caption(words),
                generator_class=params["kind"],
                caption_words=words,
            )
        )
    return Corpus(samples=samples, seed=seed, buckets=buckets)
