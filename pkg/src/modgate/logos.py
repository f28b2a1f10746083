"""Procedural badge-style logo assets.

The repo ships no third-party imagery: every logo is a text-free geometric
badge rendered onto a transparent canvas with binary alpha. Each class gets
several visual styles; styles alternate between Train and Test splits, and
every style also yields a compliant lookalike (same silhouette, different
interior geometry and luminance) to serve as a hard negative.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .catalog import CatalogImage, load_image, save_image
from .errors import EmptyLogo, InvalidSpec


class Compliance(str, Enum):
    NON_COMPLIANT = "NonCompliant"
    COMPLIANT_LOOKALIKE = "CompliantLookalike"


class Split(str, Enum):
    TRAIN = "Train"
    TEST = "Test"


@dataclass(frozen=True)
class LogoAsset:
    logo_id: str
    pixels: np.ndarray  # HxWx4 uint8, meaningful alpha
    class_label: str
    compliance: Compliance
    split: Split

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4 or self.pixels.dtype != np.uint8:
            raise InvalidSpec(f"{self.logo_id}: logo must be HxWx4 uint8")
        if not (self.pixels[..., 3] > 0).any():
            raise EmptyLogo(f"{self.logo_id}: no pixel with alpha > 0")


_SHAPES = ("ring", "burst", "shield", "diamond", "banner")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def _color(rng: np.random.Generator, lo=40, hi=230) -> tuple[int, int, int, int]:
    r, g, b = (int(v) for v in rng.integers(lo, hi, size=3))
    return (r, g, b, 255)


def _star_points(cx, cy, r_outer, r_inner, n=5, phase=-math.pi / 2):
    pts = []
    for i in range(2 * n):
        r = r_outer if i % 2 == 0 else r_inner
        a = phase + i * math.pi / n
        pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


def _draw_badge(canvas: int, shape: str, rng: np.random.Generator,
                lookalike: bool) -> np.ndarray:
    im = Image.new("RGBA", (canvas, canvas), (0, 0, 0, 0))
    draw = ImageDraw.Draw(im)
    c = canvas / 2
    r = canvas * rng.uniform(0.32, 0.42)
    outer = _color(rng)
    inner = _color(rng)
    # lookalikes keep the silhouette but change the interior structure and
    # brightness so grayscale correlation separates the pair
    if lookalike:
        inner = tuple(255 - v for v in inner[:3]) + (255,)

    if shape == "ring":
        draw.ellipse([c - r, c - r, c + r, c + r], fill=outer)
        if lookalike:
            r2 = r * 0.55
            draw.ellipse([c - r2, c - r2, c + r2, c + r2], fill=inner)
        else:
            draw.polygon(_star_points(c, c, r * 0.72, r * 0.32), fill=inner)
    elif shape == "burst":
        n = 8
        draw.polygon(_star_points(c, c, r * 1.1, r * 0.7, n=n), fill=outer)
        if lookalike:
            draw.polygon(_star_points(c, c, r * 0.6, r * 0.38, n=3), fill=inner)
        else:
            r2 = r * 0.55
            draw.ellipse([c - r2, c - r2, c + r2, c + r2], fill=inner)
    elif shape == "shield":
        top = c - r
        pts = [(c - r, top), (c + r, top), (c + r, c + r * 0.3), (c, c + r), (c - r, c + r * 0.3)]
        draw.polygon(pts, fill=outer)
        if lookalike:
            draw.rectangle([c - r * 0.6, c - r * 0.6, c + r * 0.6, c - r * 0.1], fill=inner)
        else:
            draw.polygon([(c, c - r * 0.6), (c + r * 0.5, c + r * 0.35), (c - r * 0.5, c + r * 0.35)],
                         fill=inner)
    elif shape == "diamond":
        pts = [(c, c - r * 1.1), (c + r * 0.85, c), (c, c + r * 1.1), (c - r * 0.85, c)]
        draw.polygon(pts, fill=outer)
        if lookalike:
            draw.line([c - r * 0.5, c, c + r * 0.5, c], fill=inner, width=max(2, canvas // 12))
        else:
            pts2 = [(c, c - r * 0.5), (c + r * 0.4, c), (c, c + r * 0.5), (c - r * 0.4, c)]
            draw.polygon(pts2, fill=inner)
    else:  # banner
        h = r * 0.8
        draw.rectangle([c - r * 1.2, c - h, c + r * 1.2, c + h], fill=outer)
        if lookalike:
            draw.rectangle([c - r * 1.2, c - h * 0.3, c + r * 1.2, c + h * 0.3], fill=inner)
        else:
            for i, x in enumerate(np.linspace(c - r * 0.9, c + r * 0.9, 4)):
                y = c - h * 0.4 if i % 2 == 0 else c + h * 0.1
                draw.ellipse([x - canvas * 0.05, y - canvas * 0.05,
                              x + canvas * 0.05, y + canvas * 0.05], fill=inner)

    rgba = np.asarray(im).copy()
    # binary alpha keeps nearest-neighbor resampling and compositing exact
    rgba[..., 3] = np.where(rgba[..., 3] > 0, 255, 0)
    return rgba


def generate_logo_library(classes: list[str], styles_per_class: int = 4,
                          seed: int = 0, canvas: int = 64) -> list[LogoAsset]:
    """Deterministic logo set: per class, `styles_per_class` styles, each
    contributing a NonCompliant asset and a CompliantLookalike, with splits
    alternating Train/Test by style index."""
    if not classes:
        raise InvalidSpec("classes must be non-empty")
    if styles_per_class < 1:
        raise InvalidSpec("styles_per_class must be >= 1")
    assets = []
    for ci, cls in enumerate(sorted(classes)):
        for si in range(styles_per_class):
            shape = _SHAPES[(ci + si) % len(_SHAPES)]
            split = Split.TRAIN if si % 2 == 0 else Split.TEST
            for compliance in (Compliance.NON_COMPLIANT, Compliance.COMPLIANT_LOOKALIKE):
                rng = _rng(seed, ci, si)  # same stream: lookalike shares geometry draws
                lookalike = compliance is Compliance.COMPLIANT_LOOKALIKE
                pixels = _draw_badge(canvas, shape, rng, lookalike)
                suffix = "look" if lookalike else "nc"
                assets.append(LogoAsset(f"{cls}_s{si}_{suffix}", pixels, cls, compliance, split))
    return assets


def save_logo_library(assets: list[LogoAsset], root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "logos.jsonl").open("w") as fh:
        for asset in assets:
            save_image(CatalogImage(asset.logo_id, asset.pixels, asset.class_label),
                       root / f"{asset.logo_id}.png")
            fh.write(json.dumps({
                "id": asset.logo_id,
                "class": asset.class_label,
                "compliance": asset.compliance.value,
                "split": asset.split.value,
            }, sort_keys=True) + "\n")


def load_logo_library(root: str | Path) -> list[LogoAsset]:
    root = Path(root)
    assets = []
    with (root / "logos.jsonl").open() as fh:
        for line in fh:
            rec = json.loads(line)
            img = load_image(root / f"{rec['id']}.png", rec["id"], rec["class"])
            assets.append(LogoAsset(rec["id"], img.pixels, rec["class"],
                                    Compliance(rec["compliance"]), Split(rec["split"])))
    return assets
