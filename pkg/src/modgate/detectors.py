"""L2 detectors: multi-scale template matching, a skin-ratio heuristic, and a
shallow linear classifier over signatures, behind one pluggable interface.

All detectors are pure: immutable after construction, deterministic, no side
effects in detect(). Confidence is always a real in [0, 1].
"""
from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .catalog import BoundingBox, CatalogImage, Label
from .errors import (
    DegenerateTemplate,
    DegenerateTraining,
    DimensionError,
    InvalidConfig,
    TemplateTooLarge,
)
from .logos import LogoAsset
from .raster import to_gray
from .signature import SignatureExtractor, compute_signature
from .synthgen import ALPHA_FOOTPRINT_THRESHOLD, TransformParams, tight_crop, transform_logo

_VAR_EPS = 1e-8  # per-pixel weighted gray variance below this is "no signal"
_DEN_EPS = 1e-6


@dataclass(frozen=True)
class DetectorOutput:
    confidence: float
    boxes: tuple[tuple[BoundingBox, float], ...]
    detector_id: str

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidConfig(f"confidence {self.confidence} outside [0, 1]")
        if self.boxes:
            top = max(score for _, score in self.boxes)
            if abs(self.confidence - top) > 1e-12:
                raise InvalidConfig("confidence must equal max box score")


class Detector(ABC):
    """A detector hosts one model and answers detect() for one or more classes."""

    detector_id: str
    classes: tuple[str, ...]

    @abstractmethod
    def detect(self, image: CatalogImage) -> DetectorOutput:
        ...


# ------------------------------------------------------------ template match

def zncc_map(image_gray: np.ndarray, template_gray: np.ndarray,
             weights: np.ndarray) -> np.ndarray:
    """Weighted zero-normalized cross-correlation for every valid placement.

    weights in [0, 1] mask template pixels (0 excludes). Windows with no gray
    variance under the mask score 0. Output values lie in [-1, 1].
    """
    f = image_gray.astype(np.float64)
    t = template_gray.astype(np.float64)
    w = weights.astype(np.float64)
    w_total = float(w.sum())
    if w_total <= 0:
        raise DegenerateTemplate("template has no visible pixels")
    t1 = float((w * t).sum())
    t2 = float((w * t * t).sum())
    var_t = t2 - t1 * t1 / w_total
    if var_t / w_total <= _VAR_EPS:
        raise DegenerateTemplate("template gray variance is zero")

    def corr(img, kernel):
        return fftconvolve(img, kernel[::-1, ::-1], mode="valid")

    s1 = corr(f, w)
    s2 = corr(f * f, w)
    s3 = corr(f, w * t)
    num = s3 - t1 * s1 / w_total
    var_f = np.maximum(s2 - s1 * s1 / w_total, 0.0)
    # flat windows: exact variance is 0 but FFT cancellation leaves residue
    # proportional to the window energy, so the cutoff must be relative
    flat = var_f <= 1e-9 * np.maximum(s2, 1.0)
    den = np.sqrt(var_t * var_f)
    out = np.zeros_like(num)
    ok = ~flat & (den > _DEN_EPS)
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def _template_gray_and_weights(warped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # warped is premultiplied float RGBA; recover straight color where visible
    alpha = warped[..., 3]
    w = alpha / 255.0
    rgb = np.zeros_like(warped[..., :3])
    vis = alpha > 0
    rgb[vis] = warped[..., :3][vis] / w[vis][..., None]
    gray = to_gray(np.concatenate([rgb, alpha[..., None]], axis=2))
    return gray, w


def template_match(image: CatalogImage, template: np.ndarray, scales: list[float],
                   detector_id: str = "template", class_label: str = "",
                   resample: str = "nearest") -> DetectorOutput:
    """Slide the template over the image at each scale; best weighted-ZNCC
    placement wins. Confidence = (ZNCC + 1) / 2; the single box is the
    scaled template's alpha footprint at the winning placement."""
    if not scales:
        raise InvalidConfig("scales must be non-empty")
    img_gray = to_gray(image.pixels)
    ih, iw = img_gray.shape
    base_gray, base_w = _template_gray_and_weights(
        transform_logo(template, TransformParams(1.0, 0.0, False, (0, 0)), resample))
    # degenerate check up front so the error fires even if every scale is skipped
    t1 = float((base_w * base_gray).sum())
    t2 = float((base_w * base_gray * base_gray).sum())
    w_total = float(base_w.sum())
    if w_total <= 0 or (t2 - t1 * t1 / w_total) / max(w_total, 1e-12) <= _VAR_EPS:
        raise DegenerateTemplate("template gray variance is zero")

    best = None  # (zncc, scale, y, x, warped)
    any_fit = False
    for scale in scales:
        warped = transform_logo(template, TransformParams(float(scale), 0.0, False, (0, 0)),
                                resample)
        th, tw = warped.shape[:2]
        if th > ih or tw > iw:
            continue
        any_fit = True
        gray, w = _template_gray_and_weights(warped)
        scores = zncc_map(img_gray, gray, w)
        idx = np.unravel_index(int(scores.argmax()), scores.shape)
        z = float(scores[idx])
        if best is None or z > best[0]:
            best = (z, float(scale), int(idx[0]), int(idx[1]), warped)
    if not any_fit:
        raise TemplateTooLarge(f"template exceeds {iw}x{ih} image at every scale")

    z, scale, y, x, warped = best
    conf = (z + 1.0) / 2.0
    mask = warped[..., 3] > ALPHA_FOOTPRINT_THRESHOLD
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    box = BoundingBox(x + int(xs[0]), y + int(ys[0]),
                      x + int(xs[-1]) + 1, y + int(ys[-1]) + 1, class_label)
    return DetectorOutput(conf, ((box, conf),), detector_id)


class TemplateLogoDetector(Detector):
    def __init__(self, detector_id: str, templates: list[LogoAsset],
                 scales: list[float], resample: str = "nearest"):
        if not templates:
            raise InvalidConfig("no templates")
        self.detector_id = detector_id
        self.classes = tuple(sorted({t.class_label for t in templates}))
        # crop margins off up front: matching correlates the same raster the
        # synthesizer composites, so an exact occurrence scores ZNCC 1
        self._templates = tuple(
            LogoAsset(t.logo_id, tight_crop(t.pixels), t.class_label, t.compliance, t.split)
            for t in templates)
        self._scales = tuple(float(s) for s in scales)
        self._resample = resample

    def detect(self, image: CatalogImage) -> DetectorOutput:
        outs = [template_match(image, t.pixels, list(self._scales), self.detector_id,
                               t.class_label, self._resample)
                for t in self._templates]
        return max(outs, key=lambda o: o.confidence)


def logo_detector_from_templates(templates: list[LogoAsset], scales: list[float],
                                 detector_id: str | None = None,
                                 resample: str = "nearest") -> Detector:
    if not templates:
        raise InvalidConfig("empty template list")
    if detector_id is None:
        detector_id = "logo_" + "_".join(sorted({t.class_label for t in templates}))
    return TemplateLogoDetector(detector_id, templates, scales, resample)


# ----------------------------------------------------------------- skin ratio

# Pixel-wise skin rule, fixed constants. A pixel is skin iff it satisfies
# both the RGB rule (bright, red-dominant, spread channels) and the YCbCr
# chroma window:
#   RGB:   R > 95, G > 40, B > 20, max-min > 15, |R-G| > 15, R > G, R > B
#   YCbCr: Y > 80, 85 <= Cb <= 135, 135 <= Cr <= 180   (BT.601 full-range)
SKIN_LOGISTIC_A = 6.0
SKIN_LOGISTIC_B = -3.0


def skin_mask(pixels: np.ndarray) -> np.ndarray:
    rgb = pixels[..., :3].astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    rule_rgb = ((r > 95) & (g > 40) & (b > 20) & (mx - mn > 15)
                & (np.abs(r - g) > 15) & (r > g) & (r > b))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    rule_ycbcr = (y > 80) & (cb >= 85) & (cb <= 135) & (cr >= 135) & (cr <= 180)
    return rule_rgb & rule_ycbcr


def skin_ratio(image: CatalogImage) -> float:
    return float(skin_mask(image.pixels).mean())


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def skin_ratio_detect(image: CatalogImage,
                      detector_id: str = "skin_ratio") -> DetectorOutput:
    ratio = skin_ratio(image)
    conf = float(_sigmoid(SKIN_LOGISTIC_A * ratio + SKIN_LOGISTIC_B))
    return DetectorOutput(conf, (), detector_id)


class SkinRatioDetector(Detector):
    def __init__(self, detector_id: str = "skin_ratio",
                 classes: tuple[str, ...] = ("nudity",)):
        self.detector_id = detector_id
        self.classes = classes

    def detect(self, image: CatalogImage) -> DetectorOutput:
        return skin_ratio_detect(image, self.detector_id)


# ----------------------------------------------------- shallow linear classifier

@dataclass(frozen=True)
class ShallowHyper:
    learning_rate: float = 0.5
    epochs: int = 400
    l2: float = 1e-4


@dataclass(frozen=True)
class ShallowModel:
    weights: np.ndarray
    bias: float
    dimension: int
    loss_history: tuple[float, ...] = field(default=(), compare=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "dimension": int(self.dimension),
        }))

    @classmethod
    def load(cls, path: str | Path) -> "ShallowModel":
        rec = json.loads(Path(path).read_text())
        w = np.asarray(rec["weights"], dtype=np.float64)
        if len(w) != rec["dimension"]:
            raise DimensionError("weights length disagrees with dimension")
        return cls(w, float(rec["bias"]), int(rec["dimension"]))


def _coerce_label(label) -> float:
    if isinstance(label, Label):
        return 1.0 if label is Label.NON_COMPLIANT else 0.0
    if label in (0, 1):
        return float(label)
    raise InvalidConfig(f"label {label!r} is neither Label nor 0/1")


def shallow_loss(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray,
                 l2: float) -> float:
    """Mean regularized log-loss; the bias is not regularized."""
    z = x @ weights + bias
    per = np.logaddexp(0.0, z) - y * z
    return float(per.mean() + 0.5 * l2 * float(weights @ weights))


def shallow_gradient(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray,
                     l2: float) -> tuple[np.ndarray, float]:
    p = _sigmoid(x @ weights + bias)
    resid = p - y
    grad_w = x.T @ resid / len(y) + l2 * weights
    grad_b = float(resid.mean())
    return grad_w, grad_b


def shallow_fit(samples: list[tuple[np.ndarray, object]],
                hyper: ShallowHyper | None = None) -> ShallowModel:
    """Full-batch gradient descent from zero init; deterministic for a fixed
    sample order. Raises DegenerateTraining unless both labels appear."""
    hyper = hyper or ShallowHyper()
    if not samples:
        raise DegenerateTraining("no samples")
    dims = {len(sig) for sig, _ in samples}
    if len(dims) != 1:
        raise DimensionError(f"mixed signature dimensions {sorted(dims)}")
    x = np.asarray([np.asarray(sig, dtype=np.float64) for sig, _ in samples])
    y = np.asarray([_coerce_label(lab) for _, lab in samples])
    if len(set(y)) < 2:
        raise DegenerateTraining("training data contains a single class")

    d = x.shape[1]
    w = np.zeros(d)
    b = 0.0
    history = [shallow_loss(w, b, x, y, hyper.l2)]
    for _ in range(hyper.epochs):
        gw, gb = shallow_gradient(w, b, x, y, hyper.l2)
        w = w - hyper.learning_rate * gw
        b = b - hyper.learning_rate * gb
        history.append(shallow_loss(w, b, x, y, hyper.l2))
    w.setflags(write=False)
    return ShallowModel(w, float(b), d, tuple(history))


def shallow_detect(model: ShallowModel, image: CatalogImage,
                   detector_id: str = "shallow",
                   extractor: SignatureExtractor | None = None) -> DetectorOutput:
    sig = compute_signature(image, extractor)
    if len(sig) != model.dimension:
        raise DimensionError(f"signature D={len(sig)} vs model D={model.dimension}")
    conf = float(_sigmoid(float(model.weights @ sig) + model.bias))
    return DetectorOutput(conf, (), detector_id)


class ShallowSignatureDetector(Detector):
    def __init__(self, detector_id: str, model: ShallowModel,
                 classes: tuple[str, ...] = (),
                 extractor: SignatureExtractor | None = None):
        self.detector_id = detector_id
        self.classes = classes
        self._model = model
        self._extractor = extractor

    def detect(self, image: CatalogImage) -> DetectorOutput:
        return shallow_detect(self._model, image, self.detector_id, self._extractor)


# -------------------------------------------------------------------- registry

class DetectorRegistry:
    """Immutable-after-build lookup from detector_id to Detector."""

    def __init__(self):
        self._byid: dict[str, Detector] = {}

    def register(self, detector: Detector) -> None:
        if detector.detector_id in self._byid:
            raise InvalidConfig(f"duplicate detector_id {detector.detector_id!r}")
        self._byid[detector.detector_id] = detector

    def __contains__(self, detector_id: str) -> bool:
        return detector_id in self._byid

    def __getitem__(self, detector_id: str) -> Detector:
        if detector_id not in self._byid:
            raise InvalidConfig(f"detector {detector_id!r} is not registered")
        return self._byid[detector_id]

    def ids(self) -> list[str]:
        return sorted(self._byid)


def build_registry(spec: dict, *, logos: list[LogoAsset] | None = None,
                   models: dict[str, ShallowModel] | None = None) -> DetectorRegistry:
    """Registry from a config mapping detector_id -> {kind, params, class}.

    kinds: template (params: scales, resample, class from logo library),
    skin (no params), shallow (params: model key into `models`).
    """
    registry = DetectorRegistry()
    for detector_id in sorted(spec):
        entry = spec[detector_id]
        kind = entry.get("kind")
        params = entry.get("params", {})
        if kind == "template":
            cls = entry.get("class")
            pool = [l for l in (logos or [])
                    if l.class_label == cls and l.split.value == "Train"
                    and l.compliance.value == "NonCompliant"]
            if not pool:
                raise InvalidConfig(f"{detector_id}: no Train templates for class {cls!r}")
            registry.register(TemplateLogoDetector(
                detector_id, pool, params.get("scales", [1.0]),
                params.get("resample", "nearest")))
        elif kind == "skin":
            registry.register(SkinRatioDetector(detector_id,
                                                tuple(entry.get("class", "nudity").split(","))))
        elif kind == "shallow":
            key = params.get("model")
            if not models or key not in models:
                raise InvalidConfig(f"{detector_id}: shallow model {key!r} not provided")
            registry.register(ShallowSignatureDetector(
                detector_id, models[key], tuple(entry.get("class", "").split(","))))
        else:
            raise InvalidConfig(f"{detector_id}: unknown detector kind {kind!r}")
    return registry
