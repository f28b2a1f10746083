/** DOM wiring for the review console. All logic lives in the imported
 * modules; this file only moves their state onto the page. */

import { ApiClient, TaskDto } from "./api.js";
import { ReviewQueue } from "./queue.js";
import { scaleBox } from "./overlay.js";
import { categoryRows, sparkline, StatsTracker } from "./stats.js";

const POLL_MS = 2_000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function renderTask(task: TaskDto | undefined, queueSize: number): void {
  const empty = el("empty");
  const card = el("task");
  if (!task) {
    empty.hidden = false;
    card.hidden = true;
    return;
  }
  empty.hidden = true;
  card.hidden = false;
  el("task-id").textContent = task.task_id;
  const flaggedAt = new Date(task.created_at * 1000).toLocaleTimeString();
  el("task-meta").textContent =
    `${task.detector_id} · ${task.category || "(no category)"} · ` +
    `confidence ${task.confidence.toFixed(3)} · flagged ${flaggedAt} · ` +
    `${queueSize} in queue`;

  const img = el<HTMLImageElement>("task-image");
  const overlay = el("overlay");
  const draw = () => {
    overlay.innerHTML = "";
    const dw = img.clientWidth;
    const dh = img.clientHeight;
    if (!img.naturalWidth || !dw) return;
    for (const b of task.boxes) {
      const r = scaleBox(b.box, img.naturalWidth, img.naturalHeight, dw, dh);
      const div = document.createElement("div");
      div.className = "box";
      div.style.left = `${r.left}px`;
      div.style.top = `${r.top}px`;
      div.style.width = `${r.width}px`;
      div.style.height = `${r.height}px`;
      div.title = `${b.class} ${b.score.toFixed(3)}`;
      overlay.appendChild(div);
    }
  };
  if (img.dataset.taskId !== task.task_id) {
    img.dataset.taskId = task.task_id;
    overlay.innerHTML = "";
    img.onload = draw;
    img.src = task.image_url;
  } else {
    draw();
  }
}

function renderNotices(queue: ReviewQueue): void {
  const host = el("notices");
  for (const n of queue.takeNotices()) {
    const div = document.createElement("div");
    div.className = `notice notice-${n.kind}`;
    div.textContent = n.text;
    host.prepend(div);
    setTimeout(() => div.remove(), 6_000);
  }
}

function renderStats(tracker: StatsTracker): void {
  el("roi").textContent = tracker.roiDisplay();
  el("roi-trend").textContent = sparkline(tracker.roiTrend());
  el("stale").hidden = !tracker.isStale(Date.now());
  const s = tracker.stats;
  if (!s) return;
  el("counts").textContent =
    `${s.tasks_open} open / ${s.tasks_decided} decided of ${s.tasks_total} · ` +
    `${s.confirmed} confirmed, ${s.rejected_flags} flags rejected`;
  const tbody = el("per-category");
  tbody.innerHTML = "";
  for (const row of categoryRows(s)) {
    const tr = document.createElement("tr");
    for (const v of [row.category, String(row.confirmed),
                     String(row.rejected_flags)]) {
      const td = document.createElement("td");
      td.textContent = v;
      tr.appendChild(td);
    }
    tbody.appendChild(tr);
  }
}

function boot(): void {
  const api = new ApiClient("");
  const reviewer = `console-${Math.random().toString(36).slice(2, 8)}`;
  const queue = new ReviewQueue(api, reviewer);
  const tracker = new StatsTracker();

  const repaint = () => {
    renderTask(queue.current(), queue.size());
    renderNotices(queue);
    renderStats(tracker);
  };

  const poll = async () => {
    await queue.flushRetries();
    try {
      const [page, stats] = await Promise.all([
        api.listOpenTasks(0, 50), api.stats()]);
      queue.setTasks(page.tasks);
      tracker.record(stats, Date.now());
    } catch {
      // leave last-known state on screen; the stale badge takes over
    }
    repaint();
  };

  const decide = async (verdict: "ConfirmNonCompliant" | "RejectFlag") => {
    const settled = queue.decide(verdict);
    repaint();                         // optimistic: next task is focused now
    await settled;
    repaint();
  };

  el("btn-accept").onclick = () => void decide("RejectFlag");
  el("btn-reject").onclick = () => void decide("ConfirmNonCompliant");
  document.addEventListener("keydown", (ev) => {
    if (ev.key === "a" || ev.key === "A") void decide("RejectFlag");
    if (ev.key === "r" || ev.key === "R") void decide("ConfirmNonCompliant");
  });

  void poll();
  setInterval(() => void poll(), POLL_MS);
}

// the module is also imported by node-side tests, where there is no DOM
if (typeof document !== "undefined" && document.getElementById("task")) {
  boot();
}
