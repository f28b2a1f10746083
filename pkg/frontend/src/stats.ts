/** Stats panel state. Values come from /review/stats and are shown verbatim;
 * the only client-side work is formatting, never recomputation. */

import { StatsDto } from "./api.js";

export const STALE_AFTER_MS = 10_000;

/** null means no decisions yet: show the word, not a number. */
export function formatRoi(roi: number | null): string {
  if (roi === null) return "undefined";
  return `${Math.round(roi * 1000) / 10}%`;
}

export interface CategoryRow {
  category: string;
  confirmed: number;
  rejected_flags: number;
}

export function categoryRows(stats: StatsDto): CategoryRow[] {
  return Object.keys(stats.per_category).sort().map((category) => ({
    category,
    confirmed: stats.per_category[category]!.confirmed,
    rejected_flags: stats.per_category[category]!.rejected_flags,
  }));
}

const BLOCKS = "▁▂▃▄▅▆▇█";

/** Render values in [0, 1] as a unicode sparkline. Just formatting: each
 * point is an roi straight from a poll, nothing is derived. */
export function sparkline(values: number[]): string {
  return values.map((v) => {
    const clamped = Math.min(1, Math.max(0, v));
    return BLOCKS[Math.min(BLOCKS.length - 1,
                           Math.floor(clamped * BLOCKS.length))];
  }).join("");
}

export class StatsTracker {
  private latest: StatsDto | null = null;
  private lastPollAt: number | null = null;
  private history: Array<number | null> = [];

  record(stats: StatsDto, now: number): void {
    this.latest = stats;
    this.lastPollAt = now;
    this.history.push(stats.roi);
    if (this.history.length > 60) this.history.shift();
  }

  get stats(): StatsDto | null {
    return this.latest;
  }

  /** Stale until the first poll lands, and again once data is >10s old. */
  isStale(now: number): boolean {
    if (this.lastPollAt === null) return true;
    return now - this.lastPollAt > STALE_AFTER_MS;
  }

  roiDisplay(): string {
    if (this.latest === null) return "undefined";
    return formatRoi(this.latest.roi);
  }

  /** Polled roi values so far, undefined polls dropped. */
  roiTrend(): number[] {
    return this.history.filter((v): v is number => v !== null);
  }
}
