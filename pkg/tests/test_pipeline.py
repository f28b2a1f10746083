"""Queue durability, threshold policy, and the moderation run itself."""
import json
import threading

import numpy as np
import pytest

from modgate.catalog import CatalogImage, CatalogStore, ImageState
from modgate.detectors import Detector, DetectorOutput, DetectorRegistry
from modgate.errors import (
    ConfigError,
    DuplicateDecision,
    IllegalTransition,
    InvalidConfig,
)
from modgate.pipeline import (
    Decision,
    DetectionVerdict,
    Limits,
    PipelineContext,
    ReviewDecision,
    ThresholdPolicy,
    apply_review_decision,
    build_report,
    decide,
    prevalidate,
    run_pipeline,
)
from modgate.queueing import DurableQueue
from modgate.router import L1Classifier, L1Mode, RoutingTable


# ------------------------------------------------------------- durable queue

def test_queue_fifo_and_ack(tmp_path):
    q = DurableQueue(tmp_path / "q")
    q.put({"n": 1})
    q.put({"n": 2})
    q.put({"n": 3})
    assert q.depth() == 3
    a = q.poll()
    b = q.poll()
    assert (a.payload["n"], b.payload["n"]) == (1, 2)
    q.ack(a.offset)
    assert q.depth() == 2  # b still leased, 3 waiting
    q.ack(b.offset)
    c = q.poll()
    assert c.payload["n"] == 3
    q.ack(c.offset)
    assert q.poll() is None
    assert q.depth() == 0
    q.close()


def test_queue_release_makes_message_pollable_again(tmp_path):
    q = DurableQueue(tmp_path / "q")
    q.put({"n": 1})
    m = q.poll()
    assert q.poll() is None  # leased
    q.release(m.offset)
    again = q.poll()
    assert again.offset == m.offset
    q.close()


def test_queue_unacked_survive_reopen(tmp_path):
    q = DurableQueue(tmp_path / "q")
    q.put({"n": 1})
    q.put({"n": 2})
    m = q.poll()
    q.ack(m.offset)
    q.poll()  # lease n=2 but never ack: simulated crash
    q.close()

    q2 = DurableQueue(tmp_path / "q")
    assert q2.depth() == 1
    redelivered = q2.poll()
    assert redelivered.payload["n"] == 2
    q2.ack(redelivered.offset)
    q2.close()

    q3 = DurableQueue(tmp_path / "q")
    assert q3.depth() == 0
    assert q3.poll() is None
    q3.close()


def test_queue_ack_idempotent(tmp_path):
    q = DurableQueue(tmp_path / "q")
    q.put({"n": 1})
    m = q.poll()
    q.ack(m.offset)
    q.ack(m.offset)
    q.close()
    q2 = DurableQueue(tmp_path / "q")
    assert q2.depth() == 0
    q2.close()


# --------------------------------------------------------------- thresholds

def test_policy_defaults():
    p = ThresholdPolicy()
    assert p.resolve("any", "any") == (0.50, 0.90)


def test_decide_global_bands():
    p = ThresholdPolicy(t_review=0.50, t_block=0.90)
    assert decide(0.95, p, "d", "c") is Decision.AUTO_BLOCK
    assert decide(0.60, p, "d", "c") is Decision.MANUAL_REVIEW
    assert decide(0.30, p, "d", "c") is Decision.PASS
    # band edges are inclusive
    assert decide(0.90, p, "d", "c") is Decision.AUTO_BLOCK
    assert decide(0.50, p, "d", "c") is Decision.MANUAL_REVIEW


def test_decide_category_override_beats_detector_default():
    # detector-wide t_block 0.9, but one category demands 0.99
    p = ThresholdPolicy(
        per_detector={"d": (0.5, 0.9)},
        per_detector_category={("d", "jewelry"): (0.5, 0.99)},
    )
    assert decide(0.95, p, "d", "jewelry") is Decision.MANUAL_REVIEW
    assert decide(0.95, p, "d", "toys") is Decision.AUTO_BLOCK


def test_policy_rejects_review_above_block():
    with pytest.raises(InvalidConfig):
        ThresholdPolicy(t_review=0.95, t_block=0.90)
    with pytest.raises(InvalidConfig):
        ThresholdPolicy(per_detector={"d": (0.8, 0.7)})
    with pytest.raises(InvalidConfig):
        ThresholdPolicy(per_detector_category={("d", "c"): (0.99, 0.98)})


def test_policy_rejects_out_of_range():
    with pytest.raises(InvalidConfig):
        ThresholdPolicy(t_review=-0.1)
    with pytest.raises(InvalidConfig):
        ThresholdPolicy(per_detector={"d": (0.5, 1.5)})


def test_policy_roundtrip():
    p = ThresholdPolicy(
        t_review=0.4,
        t_block=0.8,
        per_detector={"d": (0.5, 0.9)},
        per_detector_category={("d", "c"): (0.6, 0.99)},
    )
    q = ThresholdPolicy.from_dict(p.to_dict())
    assert q == p


# -------------------------------------------------------------- prevalidate

def _image(image_id: str, category: str, h: int = 32, w: int = 32) -> CatalogImage:
    pixels = np.zeros((h, w, 4), dtype=np.uint8)
    pixels[..., 3] = 255
    return CatalogImage(image_id=image_id, pixels=pixels, category=category)


def test_prevalidate_bands():
    limits = Limits(min_dim=16, max_dim=4096, allowed_formats=("png",))
    assert prevalidate(_image("ok", "c"), limits) is None
    small = prevalidate(_image("s", "c", h=8, w=40), limits)
    assert small.reason == "TooSmall"
    big = prevalidate(_image("b", "c", h=32, w=5000), limits)
    assert big.reason == "TooLarge"
    fmt = prevalidate(_image("f", "c"), limits, fmt="jpeg")
    assert fmt.reason == "BadFormat"


# ----------------------------------------------------------------- verdicts

def test_verdict_record_roundtrip():
    v = DetectionVerdict(
        image_id="i",
        detector_id="d",
        confidence=0.75,
        boxes=(((1, 2, 3, 4), "logo", 0.75),),
        decision=Decision.MANUAL_REVIEW,
        timestamp=123.0,
    )
    assert DetectionVerdict.from_record(v.to_record()) == v
    assert v.idempotency_key == ("i", "d")


# ---------------------------------------------------------------- run world

class StubDetector(Detector):
    """Scores come from a fixed table; every call is recorded."""

    def __init__(self, detector_id: str, scores: dict[str, float]):
        self.detector_id = detector_id
        self.classes = (detector_id,)
        self.scores = scores
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def detect(self, image: CatalogImage) -> DetectorOutput:
        with self._lock:
            self.calls.append(image.image_id)
        return DetectorOutput(self.scores.get(image.image_id, 0.0), (), self.detector_id)


def _world(images, scores_a=None, scores_b=None):
    """Catalog + MetadataTrusted L1 + two-detector registry over a fixed table."""
    store = CatalogStore("unused-root")
    for image_id, category, size in images:
        store.add(_image(image_id, category, h=size, w=size))
    det_a = StubDetector("det_a", scores_a or {})
    det_b = StubDetector("det_b", scores_b or {})
    registry = DetectorRegistry()
    registry.register(det_a)
    registry.register(det_b)
    table = RoutingTable({"apparel": {"det_a"}, "toys": {"det_a", "det_b"}})
    clf = L1Classifier(mode=L1Mode.METADATA_TRUSTED)
    return store, clf, table, registry, det_a, det_b


BASIC_IMAGES = [
    ("img_block", "toys", 32),     # det_a 0.95 -> AutoBlock
    ("img_review", "apparel", 32),  # det_a 0.60 -> ManualReview
    ("img_pass", "apparel", 32),    # det_a 0.30 -> Pass
    ("img_rest", "misc", 32),       # unknown category -> rest
    ("img_tiny", "toys", 8),        # prevalidation rejects
]
BASIC_SCORES_A = {"img_block": 0.95, "img_review": 0.60, "img_pass": 0.30}


def test_run_reaches_expected_terminals(tmp_path):
    store, clf, table, registry, det_a, det_b = _world(BASIC_IMAGES, BASIC_SCORES_A)
    report = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                          tmp_path / "run")
    assert store.get("img_block").state is ImageState.AUTO_BLOCKED
    assert store.get("img_review").state is ImageState.UNDER_REVIEW
    assert store.get("img_pass").state is ImageState.PUBLISHED
    assert store.get("img_rest").state is ImageState.PUBLISHED
    assert store.get("img_tiny").state is ImageState.PENDING  # rejected, never run
    assert report.images_in == 5
    assert report.rejected == 1
    assert report.ingested == 4
    assert report.balanced()


def test_rest_images_get_zero_verdicts(tmp_path):
    store, clf, table, registry, det_a, det_b = _world(BASIC_IMAGES, BASIC_SCORES_A)
    run_pipeline(store, clf, table, registry, ThresholdPolicy(), tmp_path / "run")
    ctx = PipelineContext(store, tmp_path / "run")
    assert ctx.verdicts.for_image("img_rest") == {}
    assert "img_rest" not in det_a.calls
    assert "img_rest" not in det_b.calls


def test_l2_accounting_and_reduction(tmp_path):
    store, clf, table, registry, det_a, det_b = _world(BASIC_IMAGES, BASIC_SCORES_A)
    report = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                          tmp_path / "run")
    # toys image sees both detectors, each apparel image one, rest none
    assert report.l2_invocations == 2 + 1 + 1 + 0
    assert report.l2_invocations == len(det_a.calls) + len(det_b.calls)
    assert report.l2_baseline == 4 * 2
    assert report.l2_reduction > 0
    assert report.rest_images == 1
    assert report.verdict_counts == {"det_a": 3, "det_b": 1}


def test_mixed_decisions_fold_to_worst(tmp_path):
    # Pass + ManualReview -> UnderReview; ManualReview + AutoBlock -> AutoBlocked
    images = [("both_mid", "toys", 32), ("both_hot", "toys", 32)]
    store, clf, table, registry, *_ = _world(
        images,
        scores_a={"both_mid": 0.30, "both_hot": 0.60},
        scores_b={"both_mid": 0.60, "both_hot": 0.95},
    )
    run_pipeline(store, clf, table, registry, ThresholdPolicy(), tmp_path / "run")
    assert store.get("both_mid").state is ImageState.UNDER_REVIEW
    assert store.get("both_hot").state is ImageState.AUTO_BLOCKED


def test_unregistered_detector_fails_before_any_message(tmp_path):
    store, clf, _, registry, *_ = _world(BASIC_IMAGES, BASIC_SCORES_A)
    table = RoutingTable({"apparel": {"det_a", "det_ghost"}})
    workdir = tmp_path / "run"
    with pytest.raises(ConfigError) as err:
        run_pipeline(store, clf, table, registry, ThresholdPolicy(), workdir)
    assert "det_ghost" in str(err.value)
    assert not (workdir / "events.jsonl").exists()
    assert not (workdir / "queues").exists()
    assert all(img.state is ImageState.PENDING for img in store.images())


def test_bad_worker_count_rejected(tmp_path):
    store, clf, table, registry, *_ = _world(BASIC_IMAGES, BASIC_SCORES_A)
    with pytest.raises(ConfigError):
        run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                     tmp_path / "run", workers=0)


def test_rerun_on_finished_workdir_is_noop(tmp_path):
    store, clf, table, registry, det_a, det_b = _world(BASIC_IMAGES, BASIC_SCORES_A)
    first = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                         tmp_path / "run")
    calls_after_first = len(det_a.calls) + len(det_b.calls)
    second = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                          tmp_path / "run")
    assert second.terminal_counts == first.terminal_counts
    assert second.verdict_counts == first.verdict_counts
    assert len(det_a.calls) + len(det_b.calls) == calls_after_first


def _many_images(n: int):
    rng = np.random.default_rng(7)
    cats = ["apparel", "toys", "misc"]
    images = []
    scores_a = {}
    scores_b = {}
    for i in range(n):
        image_id = f"img_{i:03d}"
        images.append((image_id, cats[i % 3], 32))
        scores_a[image_id] = float(rng.uniform(0, 1))
        scores_b[image_id] = float(rng.uniform(0, 1))
    return images, scores_a, scores_b


@pytest.mark.parametrize("workers", [1, 4, 16])
def test_worker_count_does_not_change_terminals(tmp_path, workers):
    images, scores_a, scores_b = _many_images(30)
    store, clf, table, registry, *_ = _world(images, scores_a, scores_b)
    report = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                          tmp_path / "run", workers=workers)
    states = sorted((img.image_id, img.state.value) for img in store.images())
    # single-worker run is the reference
    ref_store, ref_clf, ref_table, ref_registry, *_ = _world(images, scores_a, scores_b)
    ref = run_pipeline(ref_store, ref_clf, ref_table, ref_registry,
                       ThresholdPolicy(), tmp_path / "ref", workers=1)
    ref_states = sorted((img.image_id, img.state.value) for img in ref_store.images())
    assert states == ref_states
    assert report.terminal_counts == ref.terminal_counts
    assert report.verdict_counts == ref.verdict_counts
    assert report.balanced()


class SimulatedCrash(RuntimeError):
    pass


def test_crash_after_verdict_before_ack_resumes_cleanly(tmp_path):
    images, scores_a, scores_b = _many_images(12)

    # reference: clean run
    store, clf, table, registry, *_ = _world(images, scores_a, scores_b)
    clean = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                         tmp_path / "clean")
    clean_states = sorted((img.image_id, img.state.value) for img in store.images())

    # crashing run: die right after the 5th verdict is persisted, pre-ack
    store2, clf2, table2, registry2, *_ = _world(images, scores_a, scores_b)
    count = {"n": 0}

    def hook(point, info):
        if point == "verdict_written":
            count["n"] += 1
            if count["n"] == 5:
                raise SimulatedCrash("power loss")

    workdir = tmp_path / "crashy"
    with pytest.raises(SimulatedCrash):
        run_pipeline(store2, clf2, table2, registry2, ThresholdPolicy(),
                     workdir, workers=1, fault_hook=hook)
    # nothing reached a terminal state yet
    assert all(img.state is ImageState.PENDING for img in store2.images())

    # restart: fresh store objects, same workdir
    store3, clf3, table3, registry3, *_ = _world(images, scores_a, scores_b)
    resumed = run_pipeline(store3, clf3, table3, registry3, ThresholdPolicy(),
                           workdir, workers=1)
    resumed_states = sorted((img.image_id, img.state.value) for img in store3.images())
    assert resumed_states == clean_states
    assert resumed.terminal_counts == clean.terminal_counts
    assert resumed.verdict_counts == clean.verdict_counts
    assert resumed.balanced()

    # the verdict written just before the crash was not duplicated
    with (workdir / "events.jsonl").open() as fh:
        events = [json.loads(line) for line in fh if line.strip()]
    keys = [(e["image_id"], e["detector_id"]) for e in events if e["type"] == "verdict"]
    assert len(keys) == len(set(keys))
    assert len(keys) == sum(clean.verdict_counts.values())


def test_crash_resume_with_parallel_workers(tmp_path):
    images, scores_a, scores_b = _many_images(18)
    store, clf, table, registry, *_ = _world(images, scores_a, scores_b)
    clean = run_pipeline(store, clf, table, registry, ThresholdPolicy(),
                         tmp_path / "clean")

    store2, clf2, table2, registry2, *_ = _world(images, scores_a, scores_b)
    lock = threading.Lock()
    count = {"n": 0}

    def hook(point, info):
        with lock:
            count["n"] += 1
            if count["n"] == 7:
                raise SimulatedCrash("power loss")

    workdir = tmp_path / "crashy"
    with pytest.raises(SimulatedCrash):
        run_pipeline(store2, clf2, table2, registry2, ThresholdPolicy(),
                     workdir, workers=4, fault_hook=hook)

    store3, clf3, table3, registry3, *_ = _world(images, scores_a, scores_b)
    resumed = run_pipeline(store3, clf3, table3, registry3, ThresholdPolicy(),
                           workdir, workers=4)
    assert resumed.terminal_counts == clean.terminal_counts
    assert resumed.verdict_counts == clean.verdict_counts
    assert resumed.balanced()


def test_conservation_over_fuzzed_policies(tmp_path):
    images, scores_a, scores_b = _many_images(20)
    rng = np.random.default_rng(3)
    blocked = []
    t_blocks = sorted(float(t) for t in rng.uniform(0.05, 1.0, size=8))
    for i, t_block in enumerate(t_blocks):
        store, clf, table, registry, *_ = _world(images, scores_a, scores_b)
        policy = ThresholdPolicy(t_review=0.05, t_block=t_block)
        report = run_pipeline(store, clf, table, registry, policy,
                              tmp_path / f"run{i}")
        assert report.balanced()
        blocked.append(report.terminal_counts.get("AutoBlocked", 0))
    # raising t_block never lets MORE images through to AutoBlocked
    assert all(a >= b for a, b in zip(blocked, blocked[1:]))


# ------------------------------------------------------------------- review

def _reviewed_world(tmp_path):
    store, clf, table, registry, *_ = _world(BASIC_IMAGES, BASIC_SCORES_A)
    run_pipeline(store, clf, table, registry, ThresholdPolicy(), tmp_path / "run")
    return store, PipelineContext(store, tmp_path / "run")


def test_review_reject_blocks_image(tmp_path):
    store, ctx = _reviewed_world(tmp_path)
    state = apply_review_decision(ctx, "img_review", ReviewDecision.REJECT, "r1")
    assert state is ImageState.REVIEW_REJECTED
    assert store.get("img_review").state is ImageState.REVIEW_REJECTED
    report = build_report(ctx.events.snapshot())
    assert report.balanced()


def test_review_accept_keeps_image(tmp_path):
    store, ctx = _reviewed_world(tmp_path)
    state = apply_review_decision(ctx, "img_review", ReviewDecision.ACCEPT, "r1")
    assert state is ImageState.REVIEW_ACCEPTED


def test_review_on_published_image_is_illegal(tmp_path):
    store, ctx = _reviewed_world(tmp_path)
    with pytest.raises(IllegalTransition):
        apply_review_decision(ctx, "img_pass", ReviewDecision.REJECT, "r1")
    assert store.get("img_pass").state is ImageState.PUBLISHED


def test_review_replay_raises_and_changes_nothing(tmp_path):
    store, ctx = _reviewed_world(tmp_path)
    apply_review_decision(ctx, "img_review", ReviewDecision.ACCEPT, "r1")
    before = ctx.events.snapshot()
    with pytest.raises(DuplicateDecision):
        apply_review_decision(ctx, "img_review", ReviewDecision.REJECT, "r2")
    assert ctx.events.snapshot() == before
    assert store.get("img_review").state is ImageState.REVIEW_ACCEPTED


def test_review_state_survives_context_reload(tmp_path):
    store, ctx = _reviewed_world(tmp_path)
    apply_review_decision(ctx, "img_review", ReviewDecision.REJECT, "r1")
    ctx.events.close()
    # a fresh process loads the catalog cold and replays the log
    store2, clf, table, registry, *_ = _world(BASIC_IMAGES, BASIC_SCORES_A)
    ctx2 = PipelineContext(store2, tmp_path / "run")
    assert store2.get("img_review").state is ImageState.REVIEW_REJECTED
    assert store2.get("img_block").state is ImageState.AUTO_BLOCKED
    with pytest.raises(DuplicateDecision):
        apply_review_decision(ctx2, "img_review", ReviewDecision.ACCEPT, "r2")
