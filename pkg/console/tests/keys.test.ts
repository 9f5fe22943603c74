// @vitest-environment happy-dom
import { readFileSync } from 'node:fs';
import path from 'node:path';
import { fileURLToPath } from 'node:url';
import { afterEach, beforeEach, describe, expect, it } from 'vitest';
import { boot } from '../src/main.js';
import type { ConsoleApi } from '../src/main.js';
import { ApiError } from '../src/api.js';
import type {
  Axis,
  CandidateDescriptor,
  DecisionAck,
  NextTaskResponse,
  PrCurvePayload,
  QueueStats,
  SlicePayload,
  Verdict,
} from '../src/api.js';
import type { RawImage } from '../src/overlay.js';

const here = path.dirname(fileURLToPath(import.meta.url));
const pageHtml = readFileSync(path.join(here, '..', 'index.html'), 'utf8');
const bodyHtml = pageHtml
  .match(/<body>([\s\S]*)<\/body>/)![1]
  .replace(/<script[\s\S]*?<\/script>/g, '');

function cand(id: string): CandidateDescriptor {
  return {
    id,
    a: 3,
    b: 9,
    contact_voxels: 21,
    rep: [16, 16, 16],
    scores: { fusion: 0.91 },
    workflow: 'focused',
  };
}

const EDGE = 5;

function emptyMask(): { shape: [number, number]; runs: Array<[number, number]> } {
  return { shape: [EDGE, EDGE], runs: [] };
}

class FakeConsoleApi implements ConsoleApi {
  submits: Array<{ candidateId: string; verdict: Verdict; reviewer: string }> = [];
  sliceCalls: Array<{ id: string; axis: Axis; index: number }> = [];
  private seq = 0;
  private readonly pending: CandidateDescriptor[];

  constructor(ids: string[]) {
    this.pending = ids.map(cand);
  }

  private queueStats(): QueueStats {
    return {
      total: this.submits.length + this.pending.length,
      decided: this.submits.length,
      pending: this.pending.length,
      merge_rate: this.submits.length
        ? this.submits.filter((s) => s.verdict === 'merge').length / this.submits.length
        : null,
      verdicts: {
        merge: this.submits.filter((s) => s.verdict === 'merge').length,
        no_merge: this.submits.filter((s) => s.verdict === 'no_merge').length,
        indeterminate: this.submits.filter((s) => s.verdict === 'indeterminate').length,
      },
    };
  }

  async nextTask(_workflow: string, reviewer: string): Promise<NextTaskResponse> {
    if (!this.pending.length) return { empty: true, queue: this.queueStats() };
    return {
      empty: false,
      candidate: this.pending[0],
      lease: { reviewer, expires_at: '2026-01-01T12:00:00+00:00' },
      queue: this.queueStats(),
    };
  }

  async submitDecision(candidateId: string, verdict: Verdict, reviewer: string): Promise<DecisionAck> {
    if (!this.pending.length || this.pending[0].id !== candidateId) {
      throw new ApiError(409, 'not_leased', 'stale candidate');
    }
    this.pending.shift();
    this.submits.push({ candidateId, verdict, reviewer });
    this.seq += 1;
    return { candidate_id: candidateId, sequence: this.seq, duplicate: false };
  }

  async slice(id: string, axis: Axis, index: number): Promise<SlicePayload> {
    this.sliceCalls.push({ id, axis, index });
    const clamped = Math.max(0, Math.min(EDGE - 1, index));
    return {
      candidate_id: id,
      axis,
      index: clamped,
      edge: EDGE,
      png: 'ignored-by-stub-decoder',
      masks: { a: emptyMask(), b: emptyMask(), synapse: emptyMask() },
    };
  }

  async evalPr(): Promise<PrCurvePayload> {
    return { available: false };
  }
}

async function decodeStub(): Promise<RawImage> {
  return { width: EDGE, height: EDGE, data: new Uint8ClampedArray(EDGE * EDGE * 4) };
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

async function waitFor(check: () => boolean, ms = 2000): Promise<void> {
  const deadline = Date.now() + ms;
  while (!check()) {
    if (Date.now() > deadline) throw new Error('condition never held');
    await sleep(2);
  }
}

function press(key: string): void {
  document.dispatchEvent(new KeyboardEvent('keydown', { key, bubbles: true, cancelable: true }));
}

function startReview(api: FakeConsoleApi, reviewer = 'kim') {
  const app = boot({ api, decodePng: decodeStub, renewIntervalMs: 60_000 });
  (document.getElementById('reviewerInput') as HTMLInputElement).value = reviewer;
  document
    .getElementById('startForm')!
    .dispatchEvent(new Event('submit', { bubbles: true, cancelable: true }));
  return app;
}

describe('console keyboard flow', () => {
  let apps: Array<{ session: { stop(): void } | null }> = [];

  beforeEach(() => {
    document.body.innerHTML = bodyHtml;
  });

  afterEach(() => {
    for (const app of apps) app.session?.stop();
    apps = [];
  });

  it('pressing m posts exactly one merge verdict and advances', async () => {
    const api = new FakeConsoleApi(['c1', 'c2']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    expect(document.getElementById('candId')!.textContent).toBe('c1');

    press('m');
    await waitFor(() => app.session!.getState().candidate?.id === 'c2');
    expect(api.submits).toEqual([{ candidateId: 'c1', verdict: 'merge', reviewer: 'kim' }]);
    expect(app.session!.getState().submitted).toEqual([
      { candidateId: 'c1', verdict: 'merge', sequence: 1 },
    ]);
    expect(document.getElementById('candId')!.textContent).toBe('c2');
  });

  it('n and i map to no_merge and indeterminate, in press order', async () => {
    const api = new FakeConsoleApi(['c1', 'c2', 'c3']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');

    press('n');
    await waitFor(() => api.submits.length === 1);
    await waitFor(() => app.session!.getState().phase === 'reviewing');
    press('i');
    await waitFor(() => api.submits.length === 2);
    await waitFor(() => app.session!.getState().phase === 'reviewing');
    press('m');
    await waitFor(() => api.submits.length === 3);

    expect(api.submits.map((s) => s.verdict)).toEqual(['no_merge', 'indeterminate', 'merge']);
    expect(app.session!.getState().submitted.map((s) => s.sequence)).toEqual([1, 2, 3]);
  });

  it('verdict keys do nothing before a candidate is loaded', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = boot({ api, decodePng: decodeStub });
    apps.push(app);
    press('m'); // no session yet
    await sleep(10);
    expect(api.submits).toEqual([]);
    const btn = document.getElementById('btnMerge') as HTMLButtonElement;
    expect(btn.disabled).toBe(true);
  });

  it('keystrokes inside the reviewer input are left alone', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    const input = document.getElementById('reviewerInput') as HTMLInputElement;
    input.dispatchEvent(new KeyboardEvent('keydown', { key: 'm', bubbles: true }));
    await sleep(10);
    expect(api.submits).toEqual([]);
  });

  it('enables verdict buttons only while reviewing', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    const btn = document.getElementById('btnMerge') as HTMLButtonElement;
    expect(btn.disabled).toBe(false);
    press('m');
    await waitFor(() => app.session!.getState().phase === 'done');
    expect(btn.disabled).toBe(true);
  });

  it('shows the completion screen with totals when the queue drains', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    press('m');
    await waitFor(() => app.session!.getState().phase === 'done');
    const pane = document.getElementById('completionPane')!;
    expect(pane.hidden).toBe(false);
    expect(document.getElementById('completionStats')!.textContent).toContain(
      '1 of 1 candidates decided',
    );
    expect(document.getElementById('completionStats')!.textContent).toContain('100%');
  });

  it('number keys flip overlay checkboxes', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    const box = document.getElementById('toggleB') as HTMLInputElement;
    expect(box.checked).toBe(true);
    press('2');
    expect(app.view.toggles.b).toBe(false);
    expect(box.checked).toBe(false);
    press('2');
    expect(box.checked).toBe(true);
  });

  it('arrow keys move the slice index within the cube extent', async () => {
    const api = new FakeConsoleApi(['c1']);
    const app = startReview(api);
    apps.push(app);
    await waitFor(() => app.session?.getState().phase === 'reviewing');
    await waitFor(() => app.view.edge === EDGE); // first slice payload arrived
    expect(app.view.index).toBe(Math.floor(EDGE / 2));
    press('ArrowRight');
    expect(app.view.index).toBe(3);
    press('ArrowRight');
    press('ArrowRight'); // clamped at edge-1
    expect(app.view.index).toBe(EDGE - 1);
    press('ArrowLeft');
    expect(app.view.index).toBe(3);
    // every request the stub served used valid indices
    await waitFor(() => api.sliceCalls.length >= 3);
    for (const call of api.sliceCalls) {
      expect(call.index).toBeGreaterThanOrEqual(0);
      expect(call.index).toBeLessThan(EDGE);
    }
  });
});
