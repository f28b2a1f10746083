"""Synthetic training data: logo superimposition with exact box labels.

A logo raster is tightly cropped, geometrically transformed (flip, scale,
shear, rotate, in that order), alpha-composited onto a base catalog image,
and the ground-truth box is recovered from the warped alpha footprint. The
same machinery supplies anchor box priors via k-means under an IoU metric.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import AnnotatedSample, BoundingBox, CatalogImage, Label, Provenance, save_image
from .errors import (
    EmptyLogo,
    InvalidSpec,
    LogoTooLarge,
    OutOfBounds,
    SplitExhausted,
    TooFewBoxes,
)
from .logos import Compliance, LogoAsset, Split

# alpha strictly above this byte value counts as logo footprint (8/255)
ALPHA_FOOTPRINT_THRESHOLD = 8
_PLACEMENT_ATTEMPTS = 64


def tight_crop(pixels: np.ndarray) -> np.ndarray:
    """Minimal subraster containing every pixel with alpha > 0."""
    if pixels.ndim != 3 or pixels.shape[2] != 4:
        raise InvalidSpec("tight_crop expects HxWx4")
    mask = pixels[..., 3] > 0
    if not mask.any():
        raise EmptyLogo("no pixel with alpha > 0")
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    return pixels[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].copy()


@dataclass(frozen=True)
class TransformConfig:
    scale_range: tuple[float, float] = (0.15, 0.5)
    rotation_range_deg: tuple[float, float] = (-25.0, 25.0)
    shear_range: tuple[float, float] = (0.0, 0.0)
    flip_prob: float = 0.0
    # finite palette overriding scale_range, for detectors that enumerate scales
    scale_choices: tuple[float, ...] | None = None

    def validate(self) -> None:
        for name, (lo, hi) in (("scale", self.scale_range),
                               ("rotation", self.rotation_range_deg),
                               ("shear", self.shear_range)):
            if not (lo <= hi):
                raise InvalidSpec(f"{name}_range inverted: {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise InvalidSpec("scale must be positive")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise InvalidSpec("flip_prob outside [0, 1]")
        if self.scale_choices is not None:
            if len(self.scale_choices) == 0 or min(self.scale_choices) <= 0:
                raise InvalidSpec("scale_choices must be non-empty positive")


@dataclass(frozen=True)
class TransformParams:
    scale: float
    rotation_deg: float
    flip_h: bool
    translate: tuple[int, int]  # (tx, ty): top-left of footprint on the base
    shear: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translate"] = list(self.translate)
        return d


def _linear_matrix(scale: float, rotation_deg: float, flip_h: bool, shear: float) -> np.ndarray:
    # applied to centered coords in order flip -> scale -> shear -> rotate
    flip = np.array([[-1.0 if flip_h else 1.0, 0.0], [0.0, 1.0]])
    scl = np.array([[scale, 0.0], [0.0, scale]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    th = math.radians(rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return rot @ shr @ scl @ flip


def footprint_size(logo_w: int, logo_h: int, scale: float, rotation_deg: float = 0.0,
                   flip_h: bool = False, shear: float = 0.0) -> tuple[int, int]:
    """Axis-aligned extent of the transformed logo, in whole pixels."""
    mat = _linear_matrix(scale, rotation_deg, flip_h, shear)
    corners = np.array([[0.0, 0.0], [logo_w, 0.0], [0.0, logo_h], [logo_w, logo_h]])
    centered = corners - np.array([logo_w / 2.0, logo_h / 2.0])
    mapped = centered @ mat.T
    extent = mapped.max(axis=0) - mapped.min(axis=0)
    # tolerance so exact integer extents do not round up
    fw = int(math.ceil(extent[0] - 1e-9))
    fh = int(math.ceil(extent[1] - 1e-9))
    return max(fw, 1), max(fh, 1)


def sample_transform(rng: np.random.Generator, config: TransformConfig,
                     logo_size: tuple[int, int], base_size: tuple[int, int]) -> TransformParams:
    """Draw transform parameters uniformly from the configured ranges and a
    uniform placement over all positions where the footprint fits.

    Draw order is fixed (scale, rotation, shear, flip, tx, ty) so a given rng
    state always yields the same params. Raises LogoTooLarge when even the
    minimum scale cannot fit inside the base.
    """
    config.validate()
    lw, lh = logo_size
    bw, bh = base_size
    s_min = min(config.scale_choices) if config.scale_choices else config.scale_range[0]
    min_fw, min_fh = footprint_size(lw, lh, s_min)
    if min_fw > bw or min_fh > bh:
        raise LogoTooLarge(
            f"logo {lw}x{lh} at minimum scale {s_min} needs {min_fw}x{min_fh}, base is {bw}x{bh}")
    for _ in range(_PLACEMENT_ATTEMPTS):
        if config.scale_choices:
            scale = float(config.scale_choices[rng.integers(len(config.scale_choices))])
        else:
            scale = float(rng.uniform(*config.scale_range))
        rotation = float(rng.uniform(*config.rotation_range_deg))
        shear = float(rng.uniform(*config.shear_range))
        flip = bool(rng.random() < config.flip_prob)
        fw, fh = footprint_size(lw, lh, scale, rotation, flip, shear)
        if fw > bw or fh > bh:
            continue  # rotation/shear inflated the footprint past the base
        tx = int(rng.integers(0, bw - fw + 1))
        ty = int(rng.integers(0, bh - fh + 1))
        return TransformParams(scale, rotation, flip, (tx, ty), shear)
    raise LogoTooLarge(f"no fitting transform found in {_PLACEMENT_ATTEMPTS} attempts")


def transform_logo(pixels: np.ndarray, params: TransformParams,
                   resample: str = "bilinear") -> np.ndarray:
    """Warp a logo raster into its footprint. Returns float64 HxWx4 with
    premultiplied RGB (rgb * alpha / 255) and alpha in [0, 255].

    Inverse mapping at pixel centers; an identity transform reproduces the
    input exactly. Bilinear interpolates in premultiplied space, nearest
    snaps to the closest source pixel; both treat outside-the-raster as
    fully transparent.
    """
    if resample not in ("bilinear", "nearest"):
        raise InvalidSpec(f"unknown resample mode {resample!r}")
    lh, lw = pixels.shape[:2]
    fw, fh = footprint_size(lw, lh, params.scale, params.rotation_deg,
                            params.flip_h, params.shear)
    mat = _linear_matrix(params.scale, params.rotation_deg, params.flip_h, params.shear)
    inv = np.linalg.inv(mat)

    xs = np.arange(fw) + 0.5 - fw / 2.0
    ys = np.arange(fh) + 0.5 - fh / 2.0
    gx, gy = np.meshgrid(xs, ys)
    src = np.stack([gx, gy], axis=-1) @ inv.T
    u = src[..., 0] + lw / 2.0 - 0.5  # continuous source column, pixel-center grid
    v = src[..., 1] + lh / 2.0 - 0.5

    pix = pixels.astype(np.float64)
    pm = np.empty((lh, lw, 4))
    pm[..., :3] = pix[..., :3] * (pix[..., 3:4] / 255.0)
    pm[..., 3] = pix[..., 3]

    if resample == "nearest":
        j = np.rint(u).astype(np.int64)
        i = np.rint(v).astype(np.int64)
        inside = (i >= 0) & (i < lh) & (j >= 0) & (j < lw)
        out = np.zeros((fh, fw, 4))
        out[inside] = pm[i[inside], j[inside]]
        return out

    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    out = np.zeros((fh, fw, 4))
    for di in (0, 1):
        for dj in (0, 1):
            ii = i0 + di
            jj = j0 + dj
            w = (fv if di else 1.0 - fv) * (fu if dj else 1.0 - fu)
            inside = (ii >= 0) & (ii < lh) & (jj >= 0) & (jj < lw)
            contrib = np.zeros((fh, fw, 4))
            contrib[inside] = pm[ii[inside], jj[inside]]
            out += contrib * w[..., None]
    return out


def superimpose(base: CatalogImage, logo: LogoAsset, params: TransformParams,
                out_id: str, resample: str = "bilinear") -> AnnotatedSample:
    """Composite a transformed logo over a base image.

    out = round((alpha * logo + (255 - alpha) * base) / 255) per channel;
    pixels outside the footprint are byte-identical to the base. The truth
    box is the bounding box of footprint alpha strictly above the fringe
    threshold, offset by the placement. Lookalike logos produce Compliant
    samples with no boxes.
    """
    warped = transform_logo(tight_crop(logo.pixels), params, resample)
    fh, fw = warped.shape[:2]
    tx, ty = params.translate
    bh, bw = base.pixels.shape[:2]
    if tx < 0 or ty < 0 or tx + fw > bw or ty + fh > bh:
        raise OutOfBounds(f"footprint {fw}x{fh} at ({tx}, {ty}) exceeds base {bw}x{bh}")

    out_pixels = base.pixels.copy()
    region = out_pixels[ty:ty + fh, tx:tx + fw, :3].astype(np.float64)
    alpha = warped[..., 3]
    blended = warped[..., :3] + region * ((255.0 - alpha[..., None]) / 255.0)
    out_pixels[ty:ty + fh, tx:tx + fw, :3] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)

    mask = alpha > ALPHA_FOOTPRINT_THRESHOLD
    non_compliant = logo.compliance is Compliance.NON_COMPLIANT
    boxes: list[BoundingBox] = []
    if non_compliant:
        if not mask.any():
            raise EmptyLogo(f"{logo.logo_id}: warped footprint fully transparent")
        ys = np.flatnonzero(mask.any(axis=1))
        xs = np.flatnonzero(mask.any(axis=0))
        box = BoundingBox(tx + int(xs[0]), ty + int(ys[0]),
                          tx + int(xs[-1]) + 1, ty + int(ys[-1]) + 1, logo.class_label)
        box.validate(bw, bh)
        boxes = [box]

    image = CatalogImage(out_id, out_pixels, base.category)
    return AnnotatedSample(
        image=image,
        label=Label.NON_COMPLIANT if non_compliant else Label.COMPLIANT,
        boxes=boxes,
        provenance=Provenance.SYNTHETIC,
        info={
            "base_id": base.image_id,
            "logo_id": logo.logo_id,
            "logo_class": logo.class_label,
            "split": logo.split.value,
            "transform": params.to_dict(),
            "resample": resample,
        },
    )


def _substream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def generate_dataset(bases: list[CatalogImage], logos: list[LogoAsset],
                     n_per_class: int, neg_ratio: float, seed: int,
                     config: TransformConfig | None = None,
                     classes: list[str] | None = None,
                     split: Split = Split.TRAIN,
                     lookalike_fraction: float = 0.5,
                     resample: str = "bilinear") -> list[AnnotatedSample]:
    """Per class: n_per_class positives from that class's `split` logos and
    ceil(neg_ratio * n_per_class) negatives, interleaving plain bases with
    compliant lookalikes at `lookalike_fraction`.

    Bit-reproducible for fixed inputs: sample i draws only from the rng
    substream keyed by (seed, i). Raises SplitExhausted when a class has no
    logo in the requested split.
    """
    if not bases:
        raise InvalidSpec("no base images")
    if n_per_class < 1 or neg_ratio < 0:
        raise InvalidSpec("need n_per_class >= 1 and neg_ratio >= 0")
    if not (0.0 <= lookalike_fraction <= 1.0):
        raise InvalidSpec("lookalike_fraction outside [0, 1]")
    config = config or TransformConfig()
    config.validate()
    if classes is None:
        classes = sorted({l.class_label for l in logos
                          if l.compliance is Compliance.NON_COMPLIANT})
    if not classes:
        raise InvalidSpec("no non-compliant logo classes available")

    crop_cache: dict[str, np.ndarray] = {}

    def cropped(asset: LogoAsset) -> LogoAsset:
        if asset.logo_id not in crop_cache:
            crop_cache[asset.logo_id] = tight_crop(asset.pixels)
        return LogoAsset(asset.logo_id, crop_cache[asset.logo_id], asset.class_label,
                         asset.compliance, asset.split)

    samples: list[AnnotatedSample] = []
    counter = 0
    n_neg = math.ceil(neg_ratio * n_per_class)
    for cls in classes:
        positives = [l for l in logos if l.class_label == cls
                     and l.compliance is Compliance.NON_COMPLIANT and l.split is split]
        if not positives:
            raise SplitExhausted(f"class {cls!r} has no {split.value} logo")
        lookalikes = [l for l in logos if l.class_label == cls
                      and l.compliance is Compliance.COMPLIANT_LOOKALIKE and l.split is split]

        for _ in range(n_per_class):
            rng = _substream(seed, counter)
            base = bases[int(rng.integers(len(bases)))]
            logo = cropped(positives[int(rng.integers(len(positives)))])
            params = sample_transform(rng, config, (logo.pixels.shape[1], logo.pixels.shape[0]),
                                      (base.width, base.height))
            samples.append(superimpose(base, logo, params, f"synth_{counter:06d}", resample))
            counter += 1

        for j in range(n_neg):
            rng = _substream(seed, counter)
            base = bases[int(rng.integers(len(bases)))]
            # lookalike when the cumulative quota floor((j+1)*f) advances
            want_lookalike = bool(lookalikes) and (
                math.floor((j + 1) * lookalike_fraction) > math.floor(j * lookalike_fraction))
            if want_lookalike:
                logo = cropped(lookalikes[int(rng.integers(len(lookalikes)))])
                params = sample_transform(rng, config,
                                          (logo.pixels.shape[1], logo.pixels.shape[0]),
                                          (base.width, base.height))
                samples.append(superimpose(base, logo, params, f"synth_{counter:06d}", resample))
            else:
                img = base.copy_as(f"synth_{counter:06d}")
                samples.append(AnnotatedSample(
                    image=img, label=Label.COMPLIANT, boxes=[],
                    provenance=Provenance.SYNTHETIC,
                    info={"base_id": base.image_id, "logo_id": None,
                          "logo_class": cls, "split": split.value}))
            counter += 1
    return samples


def write_annotations(samples: list[AnnotatedSample], out_dir: str | Path) -> Path:
    """Save sample rasters under ``out_dir/images`` and write
    ``annotations.jsonl``. Output bytes depend only on the samples."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "annotations.jsonl"
    with path.open("w") as fh:
        for s in samples:
            save_image(s.image, img_dir / f"{s.image.image_id}.png")
            rec = {
                "image_id": s.image.image_id,
                "image_path": f"images/{s.image.image_id}.png",
                "label": s.label.value,
                "boxes": [{"box": b.as_list(), "class": b.class_label} for b in s.boxes],
                "provenance": s.provenance.value,
                "info": s.info,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# anchor priors


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple[tuple[float, float], ...]
    mean_iou: float
    iterations: int
    history: tuple[float, ...] = field(default=())  # mean IoU after each round


def _wh_iou(w1, h1, w2, h2):
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def _assign(dims: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    iou = _wh_iou(dims[:, None, 0], dims[:, None, 1], anchors[None, :, 0], anchors[None, :, 1])
    return iou.argmax(axis=1), iou.max(axis=1)


def anchor_kmeans(boxes: list[BoundingBox], k: int,
                  rng: np.random.Generator | None = None,
                  max_iter: int = 100) -> AnchorSet:
    """k-means over box (width, height) pairs with distance 1 - IoU of
    center-aligned boxes and per-cluster mean updates.

    Seeding is k-means++ style on the same distance. Mean IoU is evaluated
    after every update+reassign round; a round that would lower it is
    rolled back, so the recorded history never decreases.
    """
    if k < 1:
        raise InvalidSpec("k must be >= 1")
    if len(boxes) < k:
        raise TooFewBoxes(f"{len(boxes)} boxes for k={k}")
    rng = rng or np.random.default_rng(0)
    dims = np.array([[b.width, b.height] for b in boxes], dtype=np.float64)
    n = len(dims)

    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        current = dims[chosen]
        iou = _wh_iou(dims[:, None, 0], dims[:, None, 1],
                      current[None, :, 0], current[None, :, 1])
        d = 1.0 - iou.max(axis=1)
        total = float((d ** 2).sum())
        if total <= 0.0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=(d ** 2) / total)))
    anchors = dims[chosen].copy()

    assign, best_iou = _assign(dims, anchors)
    mean_iou = float(best_iou.mean())
    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        new_anchors = anchors.copy()
        for c in range(k):
            members = dims[assign == c]
            if len(members):
                new_anchors[c] = members.mean(axis=0)
        new_assign, new_best = _assign(dims, new_anchors)
        new_mean = float(new_best.mean())
        if history and new_mean < history[-1] - 1e-12:
            iterations -= 1  # rolled back: state unchanged
            break
        moved = not np.array_equal(new_assign, assign)
        anchors, assign, mean_iou = new_anchors, new_assign, new_mean
        history.append(mean_iou)
        if not moved:
            break

    order = np.lexsort((anchors[:, 1], anchors[:, 0], anchors[:, 0] * anchors[:, 1]))
    out = tuple((float(w), float(h)) for w, h in anchors[order])
    return AnchorSet(out, mean_iou, iterations, tuple(history))
