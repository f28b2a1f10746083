"""Budgeted human review: pick the flags worth a reviewer's time, turn their
decisions into labeled training data, and close the loop on the catalog.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import (
    AnnotatedSample,
    BoundingBox,
    CatalogStore,
    ImageState,
    Label,
    Provenance,
)
from .errors import DuplicateDecision, NotFound, UndefinedMetric
from .pipeline import (
    Decision,
    DetectionVerdict,
    PipelineContext,
    apply_review_decision,
)
from .pipeline import ReviewDecision as PipelineAction


class TaskStatus(str, Enum):
    OPEN = "Open"
    DECIDED = "Decided"


class ReviewVerdict(str, Enum):
    CONFIRM_NON_COMPLIANT = "ConfirmNonCompliant"
    REJECT_FLAG = "RejectFlag"


@dataclass
class ReviewTask:
    task_id: str
    image_id: str
    detector_id: str
    confidence: float
    status: TaskStatus = TaskStatus.OPEN
    created_at: float = 0.0

    @property
    def pair(self) -> tuple[str, str]:
        return (self.image_id, self.detector_id)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "image_id": self.image_id,
            "detector_id": self.detector_id,
            "confidence": self.confidence,
            "status": self.status.value,
            "created_at": self.created_at,
        }


@dataclass(frozen=True)
class ReviewDecision:
    task_id: str
    verdict: ReviewVerdict
    reviewer_id: str
    decided_at: float

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "verdict": self.verdict.value,
            "reviewer_id": self.reviewer_id,
            "decided_at": self.decided_at,
        }


def select_candidates(verdicts: Sequence[DetectionVerdict], budget: int,
                      floor: float,
                      skip: frozenset[tuple[str, str]] = frozenset(),
                      ) -> list[DetectionVerdict]:
    """Top `budget` ManualReview verdicts at or above the confidence floor,
    highest confidence first, ties broken by image_id. Pairs in `skip`
    (already open) are never re-offered."""
    eligible = [v for v in verdicts
                if v.decision is Decision.MANUAL_REVIEW
                and v.confidence >= floor
                and v.idempotency_key not in skip]
    eligible.sort(key=lambda v: (-v.confidence, v.image_id, v.detector_id))
    return eligible[:max(budget, 0)]


class LabeledStore:
    """Append-only JSONL of reviewer-verified samples; one line per decision."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._records: list[dict] = []
        if self.path.exists():
            with self.path.open() as fh:
                self._records = [json.loads(line) for line in fh if line.strip()]
        self._fh = self.path.open("a")

    def append(self, record: dict) -> None:
        with self._lock:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()
            self._records.append(dict(record))

    def records(self) -> list[dict]:
        with self._lock:
            return [dict(r) for r in self._records]

    def count_by_label(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.records():
            out[rec["label"]] = out.get(rec["label"], 0) + 1
        return out

    def to_annotated(self, catalog: CatalogStore) -> list[AnnotatedSample]:
        """Materialize records against the catalog's pixel data."""
        out = []
        for rec in self.records():
            image = catalog.get(rec["image_id"])
            boxes = [BoundingBox(*b["box"], class_label=b["class"])
                     for b in rec.get("boxes", [])]
            out.append(AnnotatedSample(
                image=image,
                label=Label(rec["label"]),
                boxes=boxes,
                provenance=Provenance.CROWD_VERIFIED,
                info={"task_id": rec["task_id"], "detector_id": rec["detector_id"]},
            ))
        return out

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class ReviewBoard:
    """Owns the task ledger: selection, decisions, stats. Task history lives
    in tasks.jsonl next to the labeled store so restarts pick up where the
    last process stopped."""

    def __init__(self, ctx: PipelineContext, labeled: LabeledStore,
                 workdir: str | Path):
        self.ctx = ctx
        self.labeled = labeled
        self.path = Path(workdir) / "tasks.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._tasks: dict[str, ReviewTask] = {}
        self._decisions: dict[str, ReviewDecision] = {}
        self._replay()
        self._fh = self.path.open("a")

    def _replay(self) -> None:
        if not self.path.exists():
            return
        with self.path.open() as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["type"] == "task":
                    self._tasks[rec["task_id"]] = ReviewTask(
                        task_id=rec["task_id"],
                        image_id=rec["image_id"],
                        detector_id=rec["detector_id"],
                        confidence=rec["confidence"],
                        status=TaskStatus(rec["status"]),
                        created_at=rec["created_at"],
                    )
                elif rec["type"] == "decision":
                    task = self._tasks[rec["task_id"]]
                    task.status = TaskStatus.DECIDED
                    self._decisions[rec["task_id"]] = ReviewDecision(
                        task_id=rec["task_id"],
                        verdict=ReviewVerdict(rec["verdict"]),
                        reviewer_id=rec["reviewer_id"],
                        decided_at=rec["decided_at"],
                    )

    def _append(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    # -- queries --------------------------------------------------------------

    def tasks(self, status: TaskStatus | None = None) -> list[ReviewTask]:
        with self._lock:
            out = [t for t in self._tasks.values()
                   if status is None or t.status is status]
        return sorted(out, key=lambda t: t.task_id)

    def get(self, task_id: str) -> ReviewTask:
        with self._lock:
            try:
                return self._tasks[task_id]
            except KeyError:
                raise NotFound(f"task {task_id!r}") from None

    def decisions(self) -> list[ReviewDecision]:
        with self._lock:
            return [self._decisions[k] for k in sorted(self._decisions)]

    def open_pairs(self) -> frozenset[tuple[str, str]]:
        with self._lock:
            return frozenset(t.pair for t in self._tasks.values()
                             if t.status is TaskStatus.OPEN)

    # -- selection ------------------------------------------------------------

    def select_for_review(self, budget: int, floor: float = 0.0) -> list[ReviewTask]:
        """Open new tasks for the best unclaimed ManualReview flags whose
        image is still awaiting review."""
        verdicts = [v for v in self.ctx.verdicts.all()
                    if self.ctx.store.get(v.image_id).state is ImageState.UNDER_REVIEW]
        chosen = select_candidates(verdicts, budget, floor, self.open_pairs())
        created = []
        with self._lock:
            for v in chosen:
                task_id = f"task_{len(self._tasks):05d}"
                task = ReviewTask(
                    task_id=task_id,
                    image_id=v.image_id,
                    detector_id=v.detector_id,
                    confidence=v.confidence,
                    status=TaskStatus.OPEN,
                    created_at=time.time(),
                )
                self._tasks[task_id] = task
                rec = task.to_dict()
                rec["type"] = "task"
                self._append(rec)
                created.append(task)
        return created

    # -- decisions ------------------------------------------------------------

    def submit_decision(self, task_id: str, verdict: ReviewVerdict,
                        reviewer_id: str = "") -> ReviewDecision:
        """Decide an Open task: Confirm rejects the image and banks a
        NonCompliant sample; RejectFlag accepts it and banks a Compliant one."""
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise NotFound(f"task {task_id!r}")
            if task.status is TaskStatus.DECIDED:
                prior = self._decisions[task_id]
                raise DuplicateDecision(
                    f"task {task_id!r} already decided "
                    f"({prior.verdict.value} by {prior.reviewer_id or '?'})")
            task.status = TaskStatus.DECIDED
            decision = ReviewDecision(task_id=task_id, verdict=verdict,
                                      reviewer_id=reviewer_id,
                                      decided_at=time.time())
            self._decisions[task_id] = decision
            rec = decision.to_dict()
            rec["type"] = "decision"
            self._append(rec)

        if verdict is ReviewVerdict.CONFIRM_NON_COMPLIANT:
            label = Label.NON_COMPLIANT
            action = PipelineAction.REJECT
        else:
            label = Label.COMPLIANT
            action = PipelineAction.ACCEPT
        stored = self.ctx.verdicts.get(task.image_id, task.detector_id)
        self.labeled.append({
            "task_id": task_id,
            "image_id": task.image_id,
            "detector_id": task.detector_id,
            "label": label.value,
            "boxes": ([{"box": list(b), "class": c, "score": s}
                       for b, c, s in stored.boxes] if stored else []),
            "confidence": task.confidence,
            "reviewer_id": reviewer_id,
            "decided_at": decision.decided_at,
        })
        try:
            apply_review_decision(self.ctx, task.image_id, action, reviewer_id)
        except DuplicateDecision:
            # another detector's task on the same image already settled it;
            # the labeled sample above still counts
            pass
        return decision

    # -- stats ----------------------------------------------------------------

    def stats(self) -> dict:
        with self._lock:
            tasks = list(self._tasks.values())
            decisions = list(self._decisions.values())
        open_count = sum(1 for t in tasks if t.status is TaskStatus.OPEN)
        confirmed = sum(1 for d in decisions
                        if d.verdict is ReviewVerdict.CONFIRM_NON_COMPLIANT)
        try:
            roi = labeling_roi(decisions)
        except UndefinedMetric:
            roi = None
        per_detector: dict[str, int] = {}
        for t in tasks:
            per_detector[t.detector_id] = per_detector.get(t.detector_id, 0) + 1
        by_task = {t.task_id: t for t in tasks}
        per_category: dict[str, dict[str, int]] = {}
        for d in decisions:
            cat = self.ctx.store.get(by_task[d.task_id].image_id).category
            bucket = per_category.setdefault(cat, {"confirmed": 0, "rejected_flags": 0})
            if d.verdict is ReviewVerdict.CONFIRM_NON_COMPLIANT:
                bucket["confirmed"] += 1
            else:
                bucket["rejected_flags"] += 1
        return {
            "tasks_total": len(tasks),
            "tasks_open": open_count,
            "tasks_decided": len(decisions),
            "confirmed": confirmed,
            "rejected_flags": len(decisions) - confirmed,
            "roi": roi,
            "labeled_counts": self.labeled.count_by_label(),
            "tasks_per_detector": dict(sorted(per_detector.items())),
            "per_category": {k: per_category[k] for k in sorted(per_category)},
        }

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def labeling_roi(decided: Iterable[ReviewDecision]) -> float:
    """Fraction of decided tasks the reviewer confirmed as non-compliant."""
    decided = list(decided)
    if not decided:
        raise UndefinedMetric("no decided tasks")
    confirmed = sum(1 for d in decided
                    if d.verdict is ReviewVerdict.CONFIRM_NON_COMPLIANT)
    return confirmed / len(decided)
