"""Image/product data model, procedural corpus generation, on-disk catalog store.

Layout on disk: ``catalog/<image_id>.png`` plus ``catalog/index.jsonl`` with
one record per image (id, category, state, width, height). PNG only; the
whole system depends on lossless storage for pixel-exact tests.
"""
from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, FormatError, IllegalTransition, InvalidSpec, NotFound
from .raster import ensure_rgba

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageState(str, Enum):
    PENDING = "Pending"
    PUBLISHED = "Published"
    AUTO_BLOCKED = "AutoBlocked"
    UNDER_REVIEW = "UnderReview"
    REVIEW_REJECTED = "ReviewRejected"
    REVIEW_ACCEPTED = "ReviewAccepted"


# The only legal edges of the image lifecycle.
ALLOWED_TRANSITIONS: dict[ImageState, frozenset[ImageState]] = {
    ImageState.PENDING: frozenset(
        {ImageState.PUBLISHED, ImageState.AUTO_BLOCKED, ImageState.UNDER_REVIEW}
    ),
    ImageState.UNDER_REVIEW: frozenset(
        {ImageState.REVIEW_ACCEPTED, ImageState.REVIEW_REJECTED}
    ),
    ImageState.PUBLISHED: frozenset(),
    ImageState.AUTO_BLOCKED: frozenset(),
    ImageState.REVIEW_REJECTED: frozenset(),
    ImageState.REVIEW_ACCEPTED: frozenset(),
}

TERMINAL_STATES = frozenset(s for s in ImageState if s is not ImageState.PENDING)


class Label(str, Enum):
    COMPLIANT = "Compliant"
    NON_COMPLIANT = "NonCompliant"


class Provenance(str, Enum):
    SYNTHETIC = "Synthetic"
    CROWD_VERIFIED = "CrowdVerified"
    SEED = "Seed"


@dataclass
class CatalogImage:
    image_id: str
    pixels: np.ndarray  # HxWx4 uint8
    category: str
    state: ImageState = ImageState.PENDING

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def validate(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 4 or p.dtype != np.uint8:
            raise InvalidSpec(f"{self.image_id}: pixels must be HxWx4 uint8")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidSpec(f"{self.image_id}: empty raster")

    def copy_as(self, image_id: str) -> "CatalogImage":
        return CatalogImage(image_id, self.pixels.copy(), self.category, ImageState.PENDING)


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    class_label: str = ""

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x_min < self.x_max <= width):
            raise InvalidSpec(f"bad x extent {self} for width {width}")
        if not (0 <= self.y_min < self.y_max <= height):
            raise InvalidSpec(f"bad y extent {self} for height {height}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class AnnotatedSample:
    image: CatalogImage
    label: Label
    boxes: list[BoundingBox] = field(default_factory=list)
    provenance: Provenance = Provenance.SYNTHETIC
    info: dict = field(default_factory=dict)  # generator metadata (logo id, transform, ...)

    def validate(self) -> None:
        self.image.validate()
        for b in self.boxes:
            b.validate(self.image.width, self.image.height)
        if self.label is Label.COMPLIANT and self.boxes:
            raise InvalidSpec("compliant sample must carry zero boxes")


@dataclass(frozen=True)
class CorpusSpec:
    n_images: int
    categories: tuple[str, ...]
    seed: int
    width: int = 128
    height: int = 128


_TEXTURES = ("flat", "gradient", "checker", "noise")


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _render_texture(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    kind = _TEXTURES[int(rng.integers(len(_TEXTURES)))]
    if kind == "flat":
        color = rng.integers(0, 256, size=3)
        rgb = np.broadcast_to(color, (h, w, 3)).astype(np.uint8)
    elif kind == "gradient":
        c0 = rng.integers(0, 256, size=3).astype(np.float64)
        c1 = rng.integers(0, 256, size=3).astype(np.float64)
        axis = int(rng.integers(2))
        n = h if axis == 0 else w
        t = np.linspace(0.0, 1.0, n)[:, None] if n > 1 else np.zeros((1, 1))
        ramp = c0 + t * (c1 - c0)  # n x 3
        if axis == 0:
            rgb = np.repeat(ramp[:, None, :], w, axis=1)
        else:
            rgb = np.repeat(ramp[None, :, :], h, axis=0)
        rgb = np.rint(rgb).astype(np.uint8)
    elif kind == "checker":
        cell = int(rng.integers(4, 17))
        c0 = rng.integers(0, 256, size=3)
        c1 = rng.integers(0, 256, size=3)
        yy, xx = np.mgrid[0:h, 0:w]
        parity = ((yy // cell) + (xx // cell)) % 2
        rgb = np.where(parity[..., None] == 0, c0, c1).astype(np.uint8)
    else:  # noise
        rgb = rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    alpha = np.full((h, w, 1), 255, dtype=np.uint8)
    return np.concatenate([rgb, alpha], axis=2)


def generate_corpus(spec: CorpusSpec) -> list[CatalogImage]:
    """Deterministic procedural corpus; same spec yields byte-identical pixels.

    Categories are assigned round-robin in the order given.
    """
    if spec.n_images < 1:
        raise InvalidSpec("n_images must be >= 1")
    if not spec.categories:
        raise InvalidSpec("categories must be non-empty")
    if spec.width < 1 or spec.height < 1:
        raise InvalidSpec("image dimensions must be >= 1")
    images = []
    for i in range(spec.n_images):
        rng = _image_rng(spec.seed, i)
        pixels = _render_texture(rng, spec.width, spec.height)
        category = spec.categories[i % len(spec.categories)]
        img = CatalogImage(f"img_{i:06d}", pixels, category)
        img.validate()
        images.append(img)
    return images


def save_image(image: CatalogImage, path: str | Path) -> None:
    """Write the raster as lossless PNG."""
    Image.fromarray(ensure_rgba(image.pixels), mode="RGBA").save(path, format="PNG")


def decode_png(data: bytes, image_id: str, category: str = "",
               source: str = "<bytes>") -> CatalogImage:
    if len(data) == 0:
        raise DecodeError(f"{source} is empty")
    if not data.startswith(PNG_MAGIC):
        raise FormatError(f"{source} is not a PNG (lossless PNG required)")
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgba = np.asarray(im.convert("RGBA"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{source}: truncated or undecodable PNG: {exc}") from exc
    return CatalogImage(image_id, rgba.copy(), category)


def load_image(path: str | Path, image_id: str | None = None, category: str = "") -> CatalogImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    return decode_png(data, image_id or path.stem, category, source=str(path))


def encode_png(image: CatalogImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(ensure_rgba(image.pixels), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


class CatalogStore:
    """Directory-backed catalog with per-image serialized state transitions.

    Reads are lock-free once an image object is handed out; transitions go
    through a compare-and-set guarded by one lock per store.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._images: dict[str, CatalogImage] = {}
        self._lock = threading.Lock()

    # -- population ---------------------------------------------------------

    def add(self, image: CatalogImage) -> None:
        image.validate()
        with self._lock:
            if image.image_id in self._images:
                raise InvalidSpec(f"duplicate image_id {image.image_id!r}")
            self._images[image.image_id] = image

    def add_all(self, images) -> None:
        for img in images:
            self.add(img)

    # -- access -------------------------------------------------------------

    def get(self, image_id: str) -> CatalogImage:
        try:
            return self._images[image_id]
        except KeyError:
            raise NotFound(image_id) from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._images

    def __len__(self) -> int:
        return len(self._images)

    def ids(self) -> list[str]:
        return sorted(self._images)

    def images(self) -> list[CatalogImage]:
        return [self._images[i] for i in self.ids()]

    def state_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for img in self._images.values():
            counts[img.state.value] = counts.get(img.state.value, 0) + 1
        return counts

    # -- state machine ------------------------------------------------------

    def transition(self, image_id: str, new_state: ImageState) -> ImageState:
        """CAS-style transition; raises IllegalTransition on any illegal edge."""
        with self._lock:
            img = self.get(image_id)
            if new_state not in ALLOWED_TRANSITIONS[img.state]:
                raise IllegalTransition(f"{image_id}: {img.state.value} -> {new_state.value}")
            old = img.state
            img.state = new_state
            return old

    def try_transition(self, image_id: str, expect: ImageState, new_state: ImageState) -> bool:
        """Transition only if the current state matches `expect`. Returns success."""
        with self._lock:
            img = self.get(image_id)
            if img.state is not expect:
                return False
            if new_state not in ALLOWED_TRANSITIONS[img.state]:
                raise IllegalTransition(f"{image_id}: {img.state.value} -> {new_state.value}")
            img.state = new_state
            return True

    def force_state(self, image_id: str, state: ImageState) -> None:
        """Set a state without edge validation.

        Only for replaying a recorded history onto a freshly loaded store;
        live code must go through transition()/try_transition().
        """
        with self._lock:
            self.get(image_id).state = state

    # -- persistence --------------------------------------------------------

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        for img in self.images():
            save_image(img, self.root / f"{img.image_id}.png")
        self.flush_index()

    def flush_index(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / "index.jsonl.tmp"
        with tmp.open("w") as fh:
            for img in self.images():
                fh.write(json.dumps({
                    "id": img.image_id,
                    "category": img.category,
                    "state": img.state.value,
                    "width": img.width,
                    "height": img.height,
                }, sort_keys=True) + "\n")
        tmp.replace(self.root / "index.jsonl")

    @classmethod
    def load(cls, root: str | Path) -> "CatalogStore":
        store = cls(root)
        index = store.root / "index.jsonl"
        if not index.exists():
            return store
        with index.open() as fh:
            for line in fh:
                rec = json.loads(line)
                img = load_image(store.root / f"{rec['id']}.png", rec["id"], rec["category"])
                img.state = ImageState(rec["state"])
                store._images[img.image_id] = img
        return store
