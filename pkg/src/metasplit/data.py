"""Image classes for few-shot episodes: Omniglot on disk or synthetic glyphs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .nncore import ConfigError

log = logging.getLogger(__name__)

IMAGE_SIZE = 28


@dataclass
class Dataset:
    classes: Dict[str, np.ndarray]  # id -> (n, 1, 28, 28) float32 in [0, 1]
    train_classes: List[str] = field(default_factory=list)
    test_classes: List[str] = field(default_factory=list)

    @property
    def class_ids(self) -> List[str]:
        return list(self.classes)

    def __len__(self) -> int:
        return len(self.classes)


def _to_tensor(img: Image.Image) -> np.ndarray:
    """Grayscale (white background, dark ink) to a 28x28 ink map in [0, 1]."""
    img = img.convert("L")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BOX)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return (1.0 - arr)[None]


def load_omniglot(root_dir, min_images: int = 20) -> Dataset:
    """Read ``root/<alphabet>/<character>/*.png``; class id is ``alphabet/character``."""
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"Omniglot root {root} not found")
    classes: Dict[str, np.ndarray] = {}
    for alphabet in sorted(p for p in root.iterdir() if p.is_dir()):
        for char in sorted(p for p in alphabet.iterdir() if p.is_dir()):
            files = sorted(char.glob("*.png"))
            cid = f"{alphabet.name}/{char.name}"
            if len(files) < min_images:
                log.warning("skipping %s: %d images < %d", cid, len(files), min_images)
                continue
            imgs = []
            for f in files:
                with Image.open(f) as im:
                    imgs.append(_to_tensor(im))
            classes[cid] = np.stack(imgs).astype(np.float32)
    if not classes:
        raise FileNotFoundError(f"no usable character directories under {root}")
    return Dataset(classes, train_classes=list(classes))


@dataclass(frozen=True)
class GlyphGenConfig:
    num_classes: int = 100
    images_per_class: int = 20
    min_strokes: int = 1
    max_strokes: int = 3
    points_per_stroke: Tuple[int, int] = (2, 4)
    jitter: float = 0.05
    stroke_width: float = 2.5
    seed: int = 0


_SUPERSAMPLE = 4


def _render(strokes: List[np.ndarray], width: float) -> np.ndarray:
    size = IMAGE_SIZE * _SUPERSAMPLE
    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    w = max(1, int(round(width * _SUPERSAMPLE)))
    for pts in strokes:
        xy = [(float(x) * (size - 1), float(y) * (size - 1)) for x, y in pts]
        draw.line(xy, fill=0, width=w, joint="curve")
        r = w / 2
        for x, y in (xy[0], xy[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=0)
    return _to_tensor(img)


def synth_glyphs(cfg: GlyphGenConfig) -> Dataset:
    """Deterministic stand-in for handwritten characters.

    Each class is a random polyline skeleton; every image re-draws it with
    Gaussian jitter on the control points plus a small random shift.
    """
    rng = np.random.default_rng(cfg.seed)
    classes: Dict[str, np.ndarray] = {}
    lo_pts, hi_pts = cfg.points_per_stroke
    for c in range(cfg.num_classes):
        n_strokes = int(rng.integers(cfg.min_strokes, cfg.max_strokes + 1))
        skeleton = [rng.uniform(0.15, 0.85, (int(rng.integers(lo_pts, hi_pts + 1)), 2))
                    for _ in range(n_strokes)]
        imgs = []
        for _ in range(cfg.images_per_class):
            shift = rng.normal(0, cfg.jitter, 2)
            strokes = [np.clip(s + shift + rng.normal(0, cfg.jitter, s.shape), 0.02, 0.98)
                       for s in skeleton]
            imgs.append(_render(strokes, cfg.stroke_width))
        classes[f"glyph{c:04d}"] = np.stack(imgs).astype(np.float32)
    return Dataset(classes, train_classes=list(classes))


def split_pools(ds: Dataset, meta_test_fraction: float, seed: int) -> Dataset:
    """Class-disjoint meta-train / meta-test split."""
    if not 0 <= meta_test_fraction < 1:
        raise ConfigError("meta_test_fraction must lie in [0, 1)")
    ids = sorted(ds.classes)
    n_test = int(round(meta_test_fraction * len(ids)))
    if meta_test_fraction > 0 and (n_test == 0 or n_test == len(ids)):
        raise ConfigError(f"{len(ids)} classes too few for a {meta_test_fraction} test fraction")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:n_test])
    test_set = set(test)
    train = [c for c in ids if c not in test_set]
    return Dataset(ds.classes, train, test)

