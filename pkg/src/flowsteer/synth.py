"""Procedural manga-like rasters for the two editing tasks.

Base images are white pages with a few screentoned shapes and black
outlines. Text removal overlays speech balloons with stroke glyphs;
screentone synthesis maps a page to its Sobel line art.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .velocity import Prompt

TASKS = ("text-removal", "screentone")
MAX_SIZE = 64
EDGE_THRESHOLD = 0.25


@dataclass
class ScreentonePattern:
    kind: str  # halftone-dot | hatch | solid
    period: int
    phase: tuple[int, int]
    level: float
    angle: int = 0

    def __post_init__(self):
        if self.period < 2:
            raise ValueError(f"screentone period must be >= 2, got {self.period}")

    def render(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size]
        if self.kind == "solid":
            return np.full((size, size), self.level)
        if self.kind == "hatch":
            coord = {0: xx, 1: yy, 2: xx + yy, 3: xx - yy}[self.angle] + self.phase[0]
            return np.where(coord % self.period == 0, 0.0, 1.0)
        # halftone dots: dark disc centred in every period x period cell
        cy = (yy + self.phase[0]) % self.period - (self.period - 1) / 2
        cx = (xx + self.phase[1]) % self.period - (self.period - 1) / 2
        r = self.level * self.period / 2
        return np.where(cy * cy + cx * cx <= r * r, 0.0, 1.0)


@dataclass
class EditSample:
    x_in: np.ndarray
    x_gt: np.ndarray
    mask: np.ndarray
    prompt: int
    seed: int
    task: str
    split: str = "train"


def _random_pattern(rng: np.random.Generator) -> ScreentonePattern:
    kind = ("halftone-dot", "hatch", "solid")[rng.integers(3)]
    period = int(rng.integers(2, 6))
    phase = (int(rng.integers(period)), int(rng.integers(period)))
    if kind == "solid":
        level = float(rng.choice([0.0, 0.35, 0.6]))
    else:
        level = float(rng.uniform(0.4, 0.9))
    return ScreentonePattern(kind, period, phase, level, angle=int(rng.integers(4)))


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    h, w = rng.integers(size // 3, size * 3 // 4, size=2)
    y0, x0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    if rng.random() < 0.5:
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def _outline(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask)


def gen_base_image(seed: int, size: int = 32) -> np.ndarray:
    """2-4 screentoned shapes with black outlines on white, flattened."""
    if not 8 <= size <= MAX_SIZE:
        raise ValueError(f"size must be in [8, {MAX_SIZE}], got {size}")
    rng = np.random.default_rng([seed, 101])
    img = np.ones((size, size))
    for _ in range(rng.integers(2, 5)):
        m = _shape_mask(rng, size)
        img = np.where(m, _random_pattern(rng).render(size), img)
        img[_outline(m)] = 0.0
    return img.ravel()


def render_text_glyphs(img: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Overlay 1-3 speech balloons carrying vertical stroke glyphs.

    Returns the lettered image and the mask of pixels that changed.
    """
    size = int(round(np.sqrt(img.size)))
    base = np.asarray(img, dtype=np.float64).reshape(size, size)
    out = base.copy()
    rng = np.random.default_rng([seed, 202])
    # a balloon needs at least 4 px per side to hold one 2x2 glyph with margins
    lo = max(4, size // 5)
    hi = max(lo, size // 3)
    for _ in range(rng.integers(1, 4)):
        bh = int(rng.integers(lo, hi + 1))
        bw = int(rng.integers(lo, hi + 1))
        y0 = int(rng.integers(0, size - bh + 1))
        x0 = int(rng.integers(0, size - bw + 1))
        out[y0 : y0 + bh, x0 : x0 + bw] = 1.0
        # columns of short strokes, one glyph per 3x3 cell, 1px margin
        first = True
        for gx in range(x0 + 1, x0 + bw - 2, 3):
            for gy in range(y0 + 1, y0 + bh - 2, 3):
                if first or rng.random() < 0.8:
                    first = False
                    glyph = rng.random((2, 2)) < 0.6
                    glyph[rng.integers(2), rng.integers(2)] = True
                    cell = out[gy : gy + 2, gx : gx + 2]
                    cell[glyph] = 0.0
    mask = (np.abs(out - base) > 1e-6).astype(np.float64)
    return out.ravel(), mask.ravel()


def extract_line_art(img: np.ndarray) -> np.ndarray:
    """Binary edge map: 1 where the normalised Sobel magnitude exceeds a fixed threshold."""
    size = int(round(np.sqrt(np.asarray(img).size)))
    a = np.asarray(img, dtype=np.float64).reshape(size, size)
    gx = ndimage.sobel(a, axis=1, mode="nearest")
    gy = ndimage.sobel(a, axis=0, mode="nearest")
    mag = np.hypot(gx, gy) / 4.0
    return (mag > EDGE_THRESHOLD).astype(np.float64).ravel()


def make_sample(seed: int, task: str, size: int = 32) -> EditSample:
    base = gen_base_image(seed, size)
    if task == "text-removal":
        x_in, mask = render_text_glyphs(base, seed)
        return EditSample(x_in, base, mask, int(Prompt.EDIT_TEXT_REMOVAL), seed, task)
    if task == "screentone":
        # dark lines on white paper, as line art is drawn
        line_art = 1.0 - extract_line_art(base)
        mask = (np.abs(line_art - base) > 1e-6).astype(np.float64)
        return EditSample(line_art, base, mask, int(Prompt.EDIT_SCREENTONE), seed, task)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed; distinct datasets draw from disjoint seed ranges."""
    return seed * 1_000_003 + index


def build_dataset(n: int, task: str, seed: int, size: int = 32) -> list[EditSample]:
    """``n`` samples; the last 10% by index form the eval split."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    n_train = n - max(1, n // 10) if n >= 2 else n
    out = []
    for k in range(n):
        s = make_sample(sample_seed(seed, k), task, size)
        s.split = "train" if k < n_train else "eval"
        out.append(s)
    return out


def write_pgm(path, img: np.ndarray) -> None:
    size = int(round(np.sqrt(img.size)))
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(size, size)
    Path(path).write_bytes(f"P5\n{size} {size}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    # header: magic, width, height, maxval, then exactly one whitespace byte
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    px = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
    return (px.astype(np.float64) / maxval).ravel()


def export_dataset(samples: list[EditSample], out_dir, seed: int, task: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        names = {}
        for key, arr in (("x_in", s.x_in), ("x_gt", s.x_gt), ("mask", s.mask)):
            name = f"{k:05d}_{key}.pgm"
            write_pgm(out_dir / name, arr)
            names[key] = name
        entries.append({"index": k, "seed": s.seed, "split": s.split, "prompt": Prompt(s.prompt).name, **names})
    manifest = {"task": task, "seed": seed, "n": len(samples), "samples": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
