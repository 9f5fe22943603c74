/**
 * Review loop state machine.
 *
 * Owns everything stateful about one reviewer's sitting: the current task
 * and its lease, queue stats, the ledger of acknowledged submissions, and
 * the two timers (lease-renewal poll while a task is held, reconnect backoff
 * while the server is unreachable). DOM code subscribes and renders; tests
 * drive it directly.
 *
 * Submission rules: a verdict can only be sent while a task is loaded, and
 * every entry in `submitted` carries the sequence number the server
 * acknowledged it with, so shown-as-submitted always means logged-exactly-
 * once. A POST that dies on the wire is retried for the same candidate after
 * backoff; the server dedupes by candidate id, so the retry cannot double-
 * log.
 */

import type {
  CandidateDescriptor,
  DecisionAck,
  LeaseInfo,
  NextTaskResponse,
  QueueStats,
  Verdict,
} from './api.js';
import { ApiError } from './api.js';

/** The two endpoints the loop needs; ApiClient satisfies this. */
export interface ReviewApi {
  nextTask(workflow: string, reviewer: string): Promise<NextTaskResponse>;
  submitDecision(candidateId: string, verdict: Verdict, reviewer: string): Promise<DecisionAck>;
}

export type Phase = 'idle' | 'loading' | 'reviewing' | 'submitting' | 'done' | 'offline';

export interface SubmittedEntry {
  candidateId: string;
  verdict: Verdict;
  sequence: number;
}

export interface SessionState {
  phase: Phase;
  reviewer: string;
  workflow: string;
  candidate: CandidateDescriptor | null;
  lease: LeaseInfo | null;
  queue: QueueStats | null;
  submitted: SubmittedEntry[];
  retryInMs: number | null;
  error: string | null;
}

export interface SessionOptions {
  api: ReviewApi;
  reviewer: string;
  workflow?: string;
  renewIntervalMs?: number;
  retryBaseMs?: number;
  retryMaxMs?: number;
}

const RENEW_INTERVAL_MS = 60_000; // well inside the server's 300 s lease TTL
const RETRY_BASE_MS = 1_000;
const RETRY_MAX_MS = 30_000;

export function nextRetryDelay(attempt: number, baseMs: number, maxMs: number): number {
  return Math.min(baseMs * 2 ** Math.max(0, attempt), maxMs);
}

type Listener = (state: SessionState) => void;

export class ReviewSession {
  private state: SessionState;
  private readonly listeners = new Set<Listener>();
  private readonly renewIntervalMs: number;
  private readonly retryBaseMs: number;
  private readonly retryMaxMs: number;
  private renewTimer: ReturnType<typeof setTimeout> | null = null;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private retryAttempt = 0;
  private stopped = false;

  constructor(private readonly opts: SessionOptions) {
    this.renewIntervalMs = opts.renewIntervalMs ?? RENEW_INTERVAL_MS;
    this.retryBaseMs = opts.retryBaseMs ?? RETRY_BASE_MS;
    this.retryMaxMs = opts.retryMaxMs ?? RETRY_MAX_MS;
    this.state = {
      phase: 'idle',
      reviewer: opts.reviewer,
      workflow: opts.workflow ?? 'focused',
      candidate: null,
      lease: null,
      queue: null,
      submitted: [],
      retryInMs: null,
      error: null,
    };
  }

  getState(): SessionState {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  async start(): Promise<void> {
    await this.advance();
  }

  stop(): void {
    this.stopped = true;
    this.clearRenew();
    if (this.retryTimer !== null) {
      clearTimeout(this.retryTimer);
      this.retryTimer = null;
    }
  }

  /** Send the pressed verdict for the loaded task, then auto-advance. */
  async submit(verdict: Verdict): Promise<void> {
    if (this.state.phase !== 'reviewing' || this.state.candidate === null) {
      return; // submission is disabled until a candidate is loaded
    }
    await this.post(this.state.candidate, verdict);
  }

  private async post(candidate: CandidateDescriptor, verdict: Verdict): Promise<void> {
    this.clearRenew();
    this.set({ phase: 'submitting', candidate, error: null });
    try {
      const ack = await this.opts.api.submitDecision(candidate.id, verdict, this.state.reviewer);
      this.backOnline();
      this.set({
        submitted: [
          ...this.state.submitted,
          { candidateId: candidate.id, verdict, sequence: ack.sequence },
        ],
      });
      await this.advance();
    } catch (err) {
      if (err instanceof ApiError) {
        // the server answered and refused; hold the task so the reviewer sees why
        this.set({ phase: 'reviewing', error: `${err.code}: ${err.message}` });
        this.scheduleRenew();
        return;
      }
      this.goOffline(err, () => this.post(candidate, verdict));
    }
  }

  private async advance(): Promise<void> {
    if (this.stopped) return;
    this.set({ phase: 'loading', error: null });
    let res: NextTaskResponse;
    try {
      res = await this.opts.api.nextTask(this.state.workflow, this.state.reviewer);
    } catch (err) {
      if (err instanceof ApiError) {
        this.set({ phase: 'idle', error: `${err.code}: ${err.message}` });
        return;
      }
      this.goOffline(err, () => this.advance());
      return;
    }
    this.backOnline();
    this.applyNext(res);
  }

  private applyNext(res: NextTaskResponse): void {
    if (res.empty) {
      this.clearRenew();
      this.set({ phase: 'done', candidate: null, lease: null, queue: res.queue });
      return;
    }
    this.set({
      phase: 'reviewing',
      candidate: res.candidate ?? null,
      lease: res.lease ?? null,
      queue: res.queue,
    });
    this.scheduleRenew();
  }

  /** Re-poll /api/tasks/next while holding a task; the server extends the
   *  current holder's lease on every poll. */
  private scheduleRenew(): void {
    this.clearRenew();
    if (this.stopped) return;
    this.renewTimer = setTimeout(() => {
      this.renewTimer = null;
      void this.renew();
    }, this.renewIntervalMs);
  }

  private async renew(): Promise<void> {
    if (this.stopped || this.state.phase !== 'reviewing' || this.state.candidate === null) return;
    try {
      const res = await this.opts.api.nextTask(this.state.workflow, this.state.reviewer);
      if (res.empty) {
        this.applyNext(res);
        return;
      }
      if (res.candidate && res.candidate.id === this.state.candidate.id) {
        this.set({ lease: res.lease ?? null, queue: res.queue });
        this.scheduleRenew();
      } else {
        // someone else decided our task while we stared at it; move on
        this.applyNext(res);
      }
    } catch {
      // renewal is best-effort; try again next tick, the reviewer's own
      // actions will surface a dead server
      this.scheduleRenew();
    }
  }

  private goOffline(err: unknown, retry: () => Promise<void>): void {
    this.clearRenew();
    const delay = nextRetryDelay(this.retryAttempt, this.retryBaseMs, this.retryMaxMs);
    this.retryAttempt += 1;
    const message = err instanceof Error ? err.message : String(err);
    this.set({ phase: 'offline', retryInMs: delay, error: message });
    if (this.stopped) return;
    this.retryTimer = setTimeout(() => {
      this.retryTimer = null;
      void retry();
    }, delay);
  }

  private backOnline(): void {
    this.retryAttempt = 0;
    if (this.state.retryInMs !== null) {
      this.set({ retryInMs: null });
    }
  }

  private clearRenew(): void {
    if (this.renewTimer !== null) {
      clearTimeout(this.renewTimer);
      this.renewTimer = null;
    }
  }

  private set(partial: Partial<SessionState>): void {
    this.state = { ...this.state, ...partial };
    for (const fn of this.listeners) fn(this.state);
  }
}
