/** Client-side task queue with optimistic decisions.
 *
 * A decision removes the task from view immediately and issues exactly one
 * POST. A duplicate response (409) surfaces a notice and the task stays
 * settled; any other API error rolls the task back; a network failure parks
 * the decision in a retry queue so it is never silently dropped.
 */

import { ApiClient, ApiError, TaskDto, Verdict } from "./api.js";

export interface Notice {
  kind: "duplicate" | "error" | "info";
  text: string;
}

export interface PendingDecision {
  task: TaskDto;
  verdict: Verdict;
}

export class ReviewQueue {
  private tasks: TaskDto[] = [];
  private inFlight = new Set<string>();
  private settled = new Set<string>();
  readonly retryQueue: PendingDecision[] = [];
  readonly notices: Notice[] = [];

  constructor(private api: ApiClient, private reviewerId: string) {}

  current(): TaskDto | undefined {
    return this.tasks[0];
  }

  size(): number {
    return this.tasks.length;
  }

  /** Merge a fresh poll, dropping tasks this client already acted on. */
  setTasks(tasks: TaskDto[]): void {
    const retrying = new Set(this.retryQueue.map((p) => p.task.task_id));
    this.tasks = tasks.filter(
      (t) => !this.settled.has(t.task_id)
        && !this.inFlight.has(t.task_id)
        && !retrying.has(t.task_id));
  }

  /** Decide the current task. Resolves true once the POST settled. */
  async decide(verdict: Verdict): Promise<boolean> {
    const task = this.tasks[0];
    if (!task) return false;
    // optimistic: advance before the request so the next task is in focus
    this.tasks.shift();
    this.inFlight.add(task.task_id);
    return this.post({ task, verdict });
  }

  private async post(pending: PendingDecision): Promise<boolean> {
    const { task, verdict } = pending;
    try {
      await this.api.decide(task.task_id, verdict, this.reviewerId);
      this.settled.add(task.task_id);
      this.inFlight.delete(task.task_id);
      return true;
    } catch (err) {
      this.inFlight.delete(task.task_id);
      if (err instanceof ApiError) {
        if (err.status === 409) {
          // someone else got there first; the task is done either way
          this.settled.add(task.task_id);
          this.notices.push({ kind: "duplicate", text: err.detail });
          return true;
        }
        // rejected outright: put the task back in front of the reviewer
        this.tasks.unshift(task);
        this.notices.push({
          kind: "error",
          text: `decision on ${task.task_id} rejected: ${err.detail}`,
        });
        return false;
      }
      // transport failure: keep the decision, retry on the next poll tick
      this.retryQueue.push(pending);
      this.notices.push({
        kind: "info",
        text: `decision on ${task.task_id} queued for retry (network error)`,
      });
      return false;
    }
  }

  /** Re-send parked decisions. Failures go back on the retry queue. */
  async flushRetries(): Promise<void> {
    const batch = this.retryQueue.splice(0);
    for (const pending of batch) {
      this.inFlight.add(pending.task.task_id);
      await this.post(pending);
    }
  }

  takeNotices(): Notice[] {
    return this.notices.splice(0);
  }
}
