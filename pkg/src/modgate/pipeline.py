"""The moderation loop: prevalidation, L1 routing, per-detector queues,
threshold decisions, idempotent verdict persistence, terminal states.

Everything that happened is an event in ``events.jsonl``; image state and the
run report are pure folds over that log, which is what makes kill-and-resume
converge and replay auditable.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .catalog import BoundingBox, CatalogImage, CatalogStore, ImageState
from .detectors import DetectorOutput, DetectorRegistry
from .errors import ConfigError, DuplicateDecision, IllegalTransition, InvalidConfig
from .queueing import DurableQueue
from .router import L1Classifier, RoutingTable, l1_classify, route

DEFAULT_T_BLOCK = 0.90
DEFAULT_T_REVIEW = 0.50


class Decision(str, Enum):
    AUTO_BLOCK = "AutoBlock"
    MANUAL_REVIEW = "ManualReview"
    PASS = "Pass"


class ReviewDecision(str, Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


@dataclass(frozen=True)
class DetectionVerdict:
    image_id: str
    detector_id: str
    confidence: float
    boxes: tuple[tuple[tuple[int, int, int, int], str, float], ...]  # (box, class, score)
    decision: Decision
    timestamp: float

    @property
    def idempotency_key(self) -> tuple[str, str]:
        return (self.image_id, self.detector_id)

    def to_record(self) -> dict:
        return {
            "type": "verdict",
            "image_id": self.image_id,
            "detector_id": self.detector_id,
            "confidence": self.confidence,
            "boxes": [{"box": list(b), "class": c, "score": s} for b, c, s in self.boxes],
            "decision": self.decision.value,
            "ts": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DetectionVerdict":
        boxes = tuple((tuple(b["box"]), b["class"], b["score"]) for b in rec["boxes"])
        return cls(rec["image_id"], rec["detector_id"], rec["confidence"], boxes,
                   Decision(rec["decision"]), rec["ts"])

    @classmethod
    def from_output(cls, image_id: str, out: DetectorOutput,
                    decision: Decision, ts: float) -> "DetectionVerdict":
        boxes = tuple((tuple(b.as_list()), b.class_label, s) for b, s in out.boxes)
        return cls(image_id, out.detector_id, out.confidence, boxes, decision, ts)


def _check_pair(t_review: float, t_block: float, where: str) -> tuple[float, float]:
    if not (0.0 <= t_review <= 1.0 and 0.0 <= t_block <= 1.0):
        raise InvalidConfig(f"{where}: thresholds must lie in [0, 1]")
    if t_review > t_block:
        raise InvalidConfig(f"{where}: t_review {t_review} > t_block {t_block}")
    return (float(t_review), float(t_block))


@dataclass(frozen=True)
class ThresholdPolicy:
    """(t_review, t_block) pairs; most specific scope wins:
    (detector, category) beats detector beats global."""
    t_review: float = DEFAULT_T_REVIEW
    t_block: float = DEFAULT_T_BLOCK
    per_detector: dict[str, tuple[float, float]] = field(default_factory=dict)
    per_detector_category: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        _check_pair(self.t_review, self.t_block, "global")
        for det, pair in self.per_detector.items():
            self.per_detector[det] = _check_pair(*pair, where=f"detector {det!r}")
        for key, pair in self.per_detector_category.items():
            self.per_detector_category[key] = _check_pair(*pair, where=f"override {key!r}")

    def resolve(self, detector_id: str, category: str) -> tuple[float, float]:
        if (detector_id, category) in self.per_detector_category:
            return self.per_detector_category[(detector_id, category)]
        if detector_id in self.per_detector:
            return self.per_detector[detector_id]
        return (self.t_review, self.t_block)

    def to_dict(self) -> dict:
        return {
            "t_review": self.t_review,
            "t_block": self.t_block,
            "per_detector": {k: list(v) for k, v in self.per_detector.items()},
            "per_detector_category": {f"{d}|{c}": list(v)
                                      for (d, c), v in self.per_detector_category.items()},
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "ThresholdPolicy":
        return cls(
            t_review=rec.get("t_review", DEFAULT_T_REVIEW),
            t_block=rec.get("t_block", DEFAULT_T_BLOCK),
            per_detector={k: tuple(v) for k, v in rec.get("per_detector", {}).items()},
            per_detector_category={tuple(k.split("|", 1)): tuple(v)
                                   for k, v in rec.get("per_detector_category", {}).items()},
        )


def decide(confidence: float, policy: ThresholdPolicy, detector_id: str,
           category: str) -> Decision:
    t_review, t_block = policy.resolve(detector_id, category)
    if confidence >= t_block:
        return Decision.AUTO_BLOCK
    if confidence >= t_review:
        return Decision.MANUAL_REVIEW
    return Decision.PASS


# ----------------------------------------------------------------- validation

@dataclass(frozen=True)
class Limits:
    min_dim: int = 16
    max_dim: int = 4096
    allowed_formats: tuple[str, ...] = ("png",)


@dataclass(frozen=True)
class Rejection:
    image_id: str
    reason: str  # TooSmall | TooLarge | BadFormat


def prevalidate(image: CatalogImage, limits: Limits = Limits(),
                fmt: str = "png") -> Rejection | None:
    h, w = image.height, image.width
    if h < limits.min_dim or w < limits.min_dim:
        return Rejection(image.image_id, "TooSmall")
    if h > limits.max_dim or w > limits.max_dim:
        return Rejection(image.image_id, "TooLarge")
    if fmt.lower() not in limits.allowed_formats:
        return Rejection(image.image_id, "BadFormat")
    return None


# ------------------------------------------------------------------ event log

class EventLog:
    """Append-only JSONL; the authoritative record of a run."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._events: list[dict] = []
        if self.path.exists():
            with self.path.open() as fh:
                self._events = [json.loads(line) for line in fh if line.strip()]
        self._fh = self.path.open("a")

    def append(self, event: dict) -> None:
        with self._lock:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()
            self._events.append(event)

    def snapshot(self) -> list[dict]:
        with self._lock:
            return list(self._events)

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class VerdictStore:
    """Idempotent verdict keeper: first write per (image_id, detector_id) wins."""

    def __init__(self, events: EventLog):
        self._events = events
        self._lock = threading.Lock()
        self._byid: dict[tuple[str, str], DetectionVerdict] = {}
        for rec in events.snapshot():
            if rec.get("type") == "verdict":
                v = DetectionVerdict.from_record(rec)
                self._byid.setdefault(v.idempotency_key, v)

    def write(self, verdict: DetectionVerdict) -> bool:
        """True if persisted, False if the key already had a verdict."""
        with self._lock:
            if verdict.idempotency_key in self._byid:
                return False
            self._byid[verdict.idempotency_key] = verdict
            self._events.append(verdict.to_record())
            return True

    def get(self, image_id: str, detector_id: str) -> DetectionVerdict | None:
        with self._lock:
            return self._byid.get((image_id, detector_id))

    def for_image(self, image_id: str) -> dict[str, DetectionVerdict]:
        with self._lock:
            return {det: v for (img, det), v in self._byid.items() if img == image_id}

    def all(self) -> list[DetectionVerdict]:
        with self._lock:
            return sorted(self._byid.values(), key=lambda v: v.idempotency_key)

    def __len__(self) -> int:
        with self._lock:
            return len(self._byid)


def fold_states(events: list[dict]) -> dict[str, ImageState]:
    """Latest recorded state per image; the pure fold the pipeline trusts."""
    out: dict[str, ImageState] = {}
    for rec in events:
        if rec.get("type") == "state":
            out[rec["image_id"]] = ImageState(rec["state"])
    return out


# ----------------------------------------------------------------- run report

@dataclass(frozen=True)
class RunReport:
    images_in: int
    rejected: int
    ingested: int
    verdict_counts: dict[str, int]
    terminal_counts: dict[str, int]
    rest_images: int
    l2_invocations: int
    l2_baseline: int

    @property
    def l2_reduction(self) -> int:
        return self.l2_baseline - self.l2_invocations

    def balanced(self) -> bool:
        return self.images_in == self.rejected + sum(self.terminal_counts.values())

    def to_dict(self) -> dict:
        return {
            "images_in": self.images_in,
            "rejected": self.rejected,
            "ingested": self.ingested,
            "verdict_counts": dict(sorted(self.verdict_counts.items())),
            "terminal_counts": dict(sorted(self.terminal_counts.items())),
            "rest_images": self.rest_images,
            "l2_invocations": self.l2_invocations,
            "l2_baseline": self.l2_baseline,
            "l2_reduction": self.l2_reduction,
            "balanced": self.balanced(),
        }


def build_report(events: list[dict]) -> RunReport:
    rejected_ids: set[str] = set()
    ingested_ids: set[str] = set()
    routed: dict[str, list[str]] = {}
    verdict_counts: dict[str, int] = {}
    detectors_registered: list[str] = []
    for rec in events:
        kind = rec.get("type")
        if kind == "rejected":
            rejected_ids.add(rec["image_id"])
        elif kind == "ingested":
            ingested_ids.add(rec["image_id"])
        elif kind == "routed":
            routed.setdefault(rec["image_id"], rec["detectors"])
        elif kind == "verdict":
            verdict_counts[rec["detector_id"]] = verdict_counts.get(rec["detector_id"], 0) + 1
        elif kind == "run_config":
            detectors_registered = rec["detectors"]
    states = fold_states(events)
    terminal_counts: dict[str, int] = {}
    for image_id, state in states.items():
        terminal_counts[state.value] = terminal_counts.get(state.value, 0) + 1
    l2 = sum(len(d) for d in routed.values())
    return RunReport(
        images_in=len(rejected_ids | ingested_ids),
        rejected=len(rejected_ids),
        ingested=len(ingested_ids),
        verdict_counts=verdict_counts,
        terminal_counts=terminal_counts,
        rest_images=sum(1 for d in routed.values() if not d),
        l2_invocations=l2,
        l2_baseline=len(ingested_ids) * len(detectors_registered),
    )


# ------------------------------------------------------------------- the run

def _terminal_for(decisions: set[Decision]) -> ImageState:
    if Decision.AUTO_BLOCK in decisions:
        return ImageState.AUTO_BLOCKED
    if Decision.MANUAL_REVIEW in decisions:
        return ImageState.UNDER_REVIEW
    return ImageState.PUBLISHED


class PipelineContext:
    """Everything a running service needs to share: store, log, verdicts."""

    def __init__(self, store: CatalogStore, workdir: str | Path):
        self.store = store
        self.workdir = Path(workdir)
        self.events = EventLog(self.workdir / "events.jsonl")
        self.verdicts = VerdictStore(self.events)
        self._replay_states()

    def _replay_states(self) -> None:
        # bring catalog states up to date with the authoritative log
        for image_id, state in fold_states(self.events.snapshot()).items():
            try:
                image = self.store.get(image_id)
            except Exception:
                continue
            if image.state is not state:
                self.store.force_state(image_id, state)


def run_pipeline(store: CatalogStore, clf: L1Classifier, table: RoutingTable,
                 registry: DetectorRegistry, policy: ThresholdPolicy,
                 workdir: str | Path, workers: int = 1,
                 limits: Limits = Limits(), fault_hook=None,
                 extractor=None) -> RunReport:
    """Drive every Pending image to a terminal state. At-least-once queues +
    idempotent verdict writes make redelivery and resume safe; a ConfigError
    fires before any message when the routing table names unknown detectors."""
    missing = sorted(table.detector_ids() - set(registry.ids()))
    if missing:
        raise ConfigError([f"routing table references unregistered detector {d!r}"
                           for d in missing])
    if workers < 1:
        raise ConfigError(["workers must be >= 1"])

    workdir = Path(workdir)
    ctx = PipelineContext(store, workdir)
    events, verdicts = ctx.events, ctx.verdicts
    past = events.snapshot()
    seen = {e["image_id"] for e in past if e.get("type") in ("ingested", "rejected")}
    routed_past = {e["image_id"]: e["detectors"] for e in past if e.get("type") == "routed"}
    stated = set(fold_states(past))

    queues = {det: DurableQueue(workdir / "queues" / det) for det in registry.ids()}
    events.append({"type": "run_config", "detectors": registry.ids(), "workers": workers})

    routed_now: dict[str, list[str]] = dict(routed_past)
    categories: dict[str, str] = {e["image_id"]: e["category"]
                                  for e in past if e.get("type") == "routed"}
    for image_id in store.ids():
        image = store.get(image_id)
        if image.state is not ImageState.PENDING or image_id in stated:
            continue
        if image_id not in seen:
            rej = prevalidate(image, limits)
            if rej is not None:
                events.append({"type": "rejected", "image_id": image_id, "reason": rej.reason})
                continue
            events.append({"type": "ingested", "image_id": image_id,
                           "category": image.category})
            category = l1_classify(clf, image, table, extractor)
            dets = sorted(route(table, category))
            events.append({"type": "routed", "image_id": image_id,
                           "category": category, "detectors": dets})
            routed_now[image_id] = dets
            categories[image_id] = category
            for det in dets:
                queues[det].put({"image_id": image_id, "detector_id": det,
                                 "category": category})
        elif image_id in routed_past:
            pass  # resume: messages already in the queue logs; unacked ones redeliver

    stop = threading.Event()
    failures: list[BaseException] = []

    def worker() -> None:
        qlist = [(det, queues[det]) for det in sorted(queues)]
        while not stop.is_set():
            msg = None
            queue = None
            det_id = None
            for det, q in qlist:
                m = q.poll()
                if m is not None:
                    msg, queue, det_id = m, q, det
                    break
            if msg is None:
                if all(q.depth() == 0 for _, q in qlist):
                    return
                time.sleep(0.001)
                continue
            try:
                image_id = msg.payload["image_id"]
                category = msg.payload["category"]
                image = store.get(image_id)
                out = registry[det_id].detect(image)
                decision = decide(out.confidence, policy, det_id, category)
                verdict = DetectionVerdict.from_output(image_id, out, decision, time.time())
                verdicts.write(verdict)  # False on redelivery: already persisted
                if fault_hook is not None:
                    fault_hook("verdict_written", {"image_id": image_id,
                                                   "detector_id": det_id})
                queue.ack(msg.offset)
            except BaseException as exc:  # noqa: BLE001 - simulated crash must surface
                failures.append(exc)
                stop.set()
                return

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        for q in queues.values():
            q.close()
        events.close()
        raise failures[0]

    # every queue drained: fold decisions into terminal states
    for image_id in sorted(routed_now):
        if image_id in stated:
            continue
        image = store.get(image_id)
        if image.state is not ImageState.PENDING:
            continue
        dets = routed_now[image_id]
        per_image = verdicts.for_image(image_id)
        decisions = {per_image[d].decision for d in dets}
        terminal = _terminal_for(decisions)
        store.transition(image_id, terminal)
        events.append({"type": "state", "image_id": image_id, "state": terminal.value})

    for q in queues.values():
        q.close()
    report = build_report(events.snapshot())
    events.append({"type": "report", "report": report.to_dict()})
    events.close()
    return report


def apply_review_decision(ctx: PipelineContext, image_id: str,
                          decision: ReviewDecision, reviewer_id: str = "") -> ImageState:
    """Accept keeps the image (ReviewAccepted); Reject removes it
    (ReviewRejected). Replays raise DuplicateDecision and change nothing."""
    past = ctx.events.snapshot()
    for rec in past:
        if rec.get("type") == "review" and rec["image_id"] == image_id:
            raise DuplicateDecision(f"image {image_id!r} already decided "
                                    f"({rec['decision']} by {rec.get('reviewer_id', '?')})")
    image = ctx.store.get(image_id)
    if image.state is not ImageState.UNDER_REVIEW:
        raise IllegalTransition(f"{image_id}: review decision on state {image.state.value}")
    new_state = (ImageState.REVIEW_ACCEPTED if decision is ReviewDecision.ACCEPT
                 else ImageState.REVIEW_REJECTED)
    ctx.store.transition(image_id, new_state)
    ctx.events.append({"type": "review", "image_id": image_id,
                       "decision": decision.value, "reviewer_id": reviewer_id})
    ctx.events.append({"type": "state", "image_id": image_id, "state": new_state.value})
    return new_state
