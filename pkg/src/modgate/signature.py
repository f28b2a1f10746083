"""Fixed-length image signatures, binarization, and Hamming k-NN search.

The descriptor is a hand-computed 128-D vector: 64-bin grayscale intensity
histogram, 48-bin spatial color histogram (4x4 grid x RGB channel mass),
and a 16-bin gradient-orientation histogram. Each block is L1-normalized
on its own; a block with zero mass stays all-zero. The extractor sits
behind `SignatureExtractor` so a learned embedding can be swapped in
without touching the index.

Search is an exact linear scan over packed binary codes with a popcount
lookup table. Determinism rules: strict `>` in binarization (ties to 0),
lower median in threshold fitting, lexicographic image_id tie-break in
ranking.
"""
from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .catalog import AnnotatedSample, CatalogImage
from .errors import DimensionError, EmptyIndex, InsufficientReference
from .raster import to_gray

GRAY_BINS = 64
COLOR_GRID = 4  # 4x4 spatial cells, 3 channels each -> 48 dims
ORIENT_BINS = 16
DIM = GRAY_BINS + COLOR_GRID * COLOR_GRID * 3 + ORIENT_BINS

INDEX_MAGIC = b"MGIX"
INDEX_VERSION = 1

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint32)


class SignatureExtractor(Protocol):
    dim: int

    def extract(self, image: CatalogImage) -> np.ndarray: ...


def _l1_normalize(block: np.ndarray) -> np.ndarray:
    total = block.sum()
    return block / total if total > 0 else block


def _gray_histogram(gray: np.ndarray) -> np.ndarray:
    bins = np.clip(np.floor(gray / 4.0).astype(np.int64), 0, GRAY_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=GRAY_BINS).astype(np.float64)
    return _l1_normalize(hist)


def _spatial_color_histogram(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    rgb = pixels[..., :3].astype(np.float64)
    ys = (np.arange(h) * COLOR_GRID) // h
    xs = (np.arange(w) * COLOR_GRID) // w
    cells = np.zeros((COLOR_GRID, COLOR_GRID, 3))
    for gy in range(COLOR_GRID):
        row_sel = ys == gy
        if not row_sel.any():
            continue
        rows = rgb[row_sel]
        for gx in range(COLOR_GRID):
            col_sel = xs == gx
            if col_sel.any():
                cells[gy, gx] = rows[:, col_sel].sum(axis=(0, 1))
    return _l1_normalize(cells.ravel())


def _orientation_histogram(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    gy = np.gradient(gray, axis=0) if h >= 2 else np.zeros_like(gray)
    gx = np.gradient(gray, axis=1) if w >= 2 else np.zeros_like(gray)
    mag = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)  # (-pi, pi]
    # circular bins centered on multiples of 2*pi/ORIENT_BINS, so axis-aligned
    # and diagonal gradients sit at bin centers, not on edges
    frac = (angle + np.pi) / (2 * np.pi) * ORIENT_BINS
    bins = np.floor(frac + 0.5).astype(np.int64) % ORIENT_BINS
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=ORIENT_BINS)
    return _l1_normalize(hist)


class HistogramExtractor:
    """Default 128-D descriptor; deterministic, invariant to id and state."""

    dim = DIM

    def extract(self, image: CatalogImage) -> np.ndarray:
        gray = to_gray(image.pixels)
        sig = np.concatenate([
            _gray_histogram(gray),
            _spatial_color_histogram(image.pixels),
            _orientation_histogram(gray),
        ])
        assert sig.shape == (self.dim,)
        return sig


_DEFAULT_EXTRACTOR = HistogramExtractor()


def compute_signature(image: CatalogImage, extractor: SignatureExtractor | None = None) -> np.ndarray:
    return (extractor or _DEFAULT_EXTRACTOR).extract(image)


@dataclass(frozen=True)
class BinarizationModel:
    thresholds: np.ndarray  # one per dimension, immutable after fit

    @property
    def dim(self) -> int:
        return int(self.thresholds.shape[0])


def fit_binarization(reference: Iterable[np.ndarray]) -> BinarizationModel:
    """Per-dimension lower-median thresholds over >= 2 reference signatures."""
    mat = np.asarray(list(reference), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise InsufficientReference("need at least 2 reference signatures")
    ordered = np.sort(mat, axis=0)
    lower_median = ordered[(mat.shape[0] - 1) // 2]
    thresholds = lower_median.copy()
    thresholds.flags.writeable = False
    return BinarizationModel(thresholds)


def binarize(sig: np.ndarray, model: BinarizationModel) -> np.ndarray:
    """Packed bit code; bit d set iff sig[d] > threshold[d] (ties to 0)."""
    sig = np.asarray(sig, dtype=np.float64)
    if sig.shape != (model.dim,):
        raise DimensionError(f"signature dim {sig.shape} vs model dim {model.dim}")
    bits = (sig > model.thresholds).astype(np.uint8)
    return np.packbits(bits)


def unpack_bits(code: np.ndarray, dim: int) -> np.ndarray:
    return np.unpackbits(np.asarray(code, dtype=np.uint8))[:dim]


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise DimensionError(f"code length mismatch: {a.shape} vs {b.shape}")
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


class SimilarityIndex:
    """Exact Hamming k-NN over packed binary signatures.

    Insertions swap in fresh arrays under a lock, so concurrent readers
    always see a complete snapshot.
    """

    def __init__(self, binarization: BinarizationModel,
                 extractor: SignatureExtractor | None = None):
        self.binarization = binarization
        self.extractor = extractor or _DEFAULT_EXTRACTOR
        self._lock = threading.Lock()
        self._ids: tuple[str, ...] = ()
        self._codes = np.zeros((0, (binarization.dim + 7) // 8), dtype=np.uint8)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dim(self) -> int:
        return self.binarization.dim

    def add_code(self, image_id: str, code: np.ndarray) -> None:
        code = np.asarray(code, dtype=np.uint8)
        if code.shape != (self._codes.shape[1],):
            raise DimensionError(f"code shape {code.shape}, want ({self._codes.shape[1]},)")
        with self._lock:
            if image_id in self._ids:
                raise ValueError(f"duplicate id {image_id!r}")
            self._ids = self._ids + (image_id,)
            self._codes = np.vstack([self._codes, code[None, :]])

    def add_image(self, image: CatalogImage) -> None:
        sig = self.extractor.extract(image)
        self.add_code(image.image_id, binarize(sig, self.binarization))

    def add_images(self, images: Iterable[CatalogImage]) -> None:
        for img in images:
            self.add_image(img)

    def _snapshot(self):
        with self._lock:
            return self._ids, self._codes

    def query_code(self, code: np.ndarray, k: int) -> list[tuple[str, int]]:
        ids, codes = self._snapshot()
        if not ids:
            raise EmptyIndex("index holds no entries")
        if k < 1:
            raise ValueError("k must be >= 1")
        code = np.asarray(code, dtype=np.uint8)
        if code.shape != (codes.shape[1],):
            raise DimensionError(f"probe code shape {code.shape}")
        dists = _POPCOUNT[np.bitwise_xor(codes, code[None, :])].sum(axis=1)
        order = sorted(range(len(ids)), key=lambda i: (dists[i], ids[i]))
        return [(ids[i], int(dists[i])) for i in order[: min(k, len(ids))]]


def knn_query(index: SimilarityIndex, probe: CatalogImage, k: int) -> list[tuple[str, int]]:
    """Top-k ids by ascending Hamming distance, ties by lexicographic id."""
    sig = index.extractor.extract(probe)
    return index.query_code(binarize(sig, index.binarization), k)


def expand_training_set(index: SimilarityIndex, seeds: list[AnnotatedSample],
                        k: int, max_distance: int) -> list[str]:
    """Candidate ids near any seed, deduplicated, seeds excluded.

    Candidates are meant for human labeling downstream; nothing here assigns
    a label. Result ordered by (best distance over seeds, image_id).
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    seed_ids = {s.image.image_id for s in seeds}
    best: dict[str, int] = {}
    for seed in seeds:
        for image_id, dist in knn_query(index, seed.image, k):
            if image_id in seed_ids or dist > max_distance:
                continue
            if image_id not in best or dist < best[image_id]:
                best[image_id] = dist
    return sorted(best, key=lambda i: (best[i], i))


# -- persistence ------------------------------------------------------------
# index.bin: magic, u32 version, u32 dim, u64 count, then per record
# u16 id length, id bytes (utf-8), dim/8 code bytes. Little-endian.

def save_index(index: SimilarityIndex, index_path: str | Path,
               thresholds_path: str | Path) -> None:
    ids, codes = index._snapshot()
    with open(index_path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIQ", INDEX_VERSION, index.dim, len(ids)))
        for image_id, code in zip(ids, codes):
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(code.tobytes())
    Path(thresholds_path).write_text(
        json.dumps({"thresholds": index.binarization.thresholds.tolist()})
    )


def load_index(index_path: str | Path, thresholds_path: str | Path,
               extractor: SignatureExtractor | None = None) -> SimilarityIndex:
    payload = json.loads(Path(thresholds_path).read_text())
    thresholds = np.asarray(payload["thresholds"], dtype=np.float64)
    thresholds.flags.writeable = False
    index = SimilarityIndex(BinarizationModel(thresholds), extractor)
    code_bytes = (index.dim + 7) // 8
    with open(index_path, "rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise ValueError(f"bad index magic {magic!r}")
        version, dim, count = struct.unpack("<IIQ", fh.read(16))
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        if dim != index.dim:
            raise DimensionError(f"index dim {dim} vs thresholds dim {index.dim}")
        for _ in range(count):
            (id_len,) = struct.unpack("<H", fh.read(2))
            image_id = fh.read(id_len).decode("utf-8")
            code = np.frombuffer(fh.read(code_bytes), dtype=np.uint8)
            index.add_code(image_id, code)
    return index
