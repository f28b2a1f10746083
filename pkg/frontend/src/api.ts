/** Typed client for the review HTTP API. The console talks to nothing else. */

export interface BoxDto {
  box: [number, number, number, number];
  class: string;
  score: number;
}

export interface TaskDto {
  task_id: string;
  image_id: string;
  detector_id: string;
  confidence: number;
  status: string;
  created_at: number;
  category: string;
  image_url: string;
  boxes: BoxDto[];
}

export interface TaskPage {
  tasks: TaskDto[];
  total: number;
  offset: number;
  limit: number;
}

export interface CategoryCounts {
  confirmed: number;
  rejected_flags: number;
}

export interface StatsDto {
  tasks_total: number;
  tasks_open: number;
  tasks_decided: number;
  confirmed: number;
  rejected_flags: number;
  roi: number | null;
  labeled_counts: Record<string, number>;
  tasks_per_detector: Record<string, number>;
  per_category: Record<string, CategoryCounts>;
}

export interface DecisionDto {
  task_id: string;
  verdict: string;
  reviewer_id: string;
  image_id: string;
  image_state: string;
}

export type Verdict = "ConfirmNonCompliant" | "RejectFlag";

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseOrThrow<T>(res: Response): Promise<T> {
  if (res.ok) {
    return (await res.json()) as T;
  }
  let detail = res.statusText;
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, detail);
}

export class ApiClient {
  private fetcher: FetchLike;

  constructor(readonly base: string = "", fetcher?: FetchLike) {
    // wrap rather than store the global: bare `fetch` loses its binding
    this.fetcher = fetcher ?? ((url, init) => fetch(url, init));
  }

  async listOpenTasks(offset = 0, limit = 50): Promise<TaskPage> {
    const res = await this.fetcher(
      `${this.base}/review/tasks?status=open&offset=${offset}&limit=${limit}`);
    return parseOrThrow<TaskPage>(res);
  }

  async decide(taskId: string, verdict: Verdict,
               reviewerId: string): Promise<DecisionDto> {
    const res = await this.fetcher(
      `${this.base}/review/tasks/${encodeURIComponent(taskId)}/decision`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ verdict, reviewer_id: reviewerId }),
      });
    return parseOrThrow<DecisionDto>(res);
  }

  async stats(): Promise<StatsDto> {
    const res = await this.fetcher(`${this.base}/review/stats`);
    return parseOrThrow<StatsDto>(res);
  }
}
