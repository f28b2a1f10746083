"""Two-stage inference plumbing: an L1 broad classifier decides which L2
detectors an image visits. Images the table does not cover route as `rest`
and visit nothing."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .catalog import CatalogImage
from .errors import InsufficientData, InvalidConfig, NotFitted
from .signature import SignatureExtractor, compute_signature

REST = "rest"


@dataclass(frozen=True)
class RoutingTable:
    routes: dict[str, frozenset[str]]

    def __post_init__(self):
        clean = {}
        for category, ids in self.routes.items():
            clean[category] = frozenset(ids)
        if clean.get(REST):
            raise InvalidConfig("`rest` must map to the empty set")
        clean.setdefault(REST, frozenset())
        object.__setattr__(self, "routes", clean)

    def categories(self) -> list[str]:
        return sorted(self.routes)

    def detector_ids(self) -> set[str]:
        out: set[str] = set()
        for ids in self.routes.values():
            out |= ids
        return out

    @classmethod
    def from_dict(cls, mapping: dict[str, list[str]]) -> "RoutingTable":
        return cls({k: frozenset(v) for k, v in mapping.items()})


def route(table: RoutingTable, category: str) -> frozenset[str]:
    """Pure lookup; `rest` and unknown categories get no detectors."""
    return table.routes.get(category, frozenset())


class L1Mode(str, Enum):
    METADATA_TRUSTED = "MetadataTrusted"
    NEAREST_CENTROID = "NearestCentroid"


@dataclass(frozen=True)
class L1Classifier:
    mode: L1Mode
    centroids: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode is L1Mode.NEAREST_CENTROID and self.centroids:
            dims = {len(v) for v in self.centroids.values()}
            if len(dims) != 1:
                raise InvalidConfig(f"centroid dimensions disagree: {sorted(dims)}")


def fit_centroids(labeled: list[tuple[CatalogImage, str]],
                  extractor: SignatureExtractor | None = None) -> L1Classifier:
    """NearestCentroid classifier with one mean signature per category."""
    if not labeled:
        raise InsufficientData("no labeled images")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for image, category in labeled:
        sig = compute_signature(image, extractor)
        if category in sums:
            sums[category] = sums[category] + sig
            counts[category] += 1
        else:
            sums[category] = sig.astype(np.float64)
            counts[category] = 1
    centroids = {cat: sums[cat] / counts[cat] for cat in sums}
    return L1Classifier(L1Mode.NEAREST_CENTROID, centroids)


def l1_classify(clf: L1Classifier, image: CatalogImage,
                table: RoutingTable | None = None,
                extractor: SignatureExtractor | None = None) -> str:
    """Assign the broad category. With a routing table supplied, categories
    the table does not know collapse to `rest` so they skip every detector."""
    if clf.mode is L1Mode.METADATA_TRUSTED:
        category = image.category
    else:
        if not clf.centroids:
            raise NotFitted("NearestCentroid classifier has no centroids")
        sig = compute_signature(image, extractor)
        best = None
        for cat in sorted(clf.centroids):  # lexicographic tie-break
            d = float(np.linalg.norm(clf.centroids[cat] - sig))
            if best is None or d < best[0]:
                best = (d, cat)
        category = best[1]
    if table is not None and category not in table.routes:
        return REST
    return category
