/**
 * DOM wiring for the review console.
 *
 * One ConsoleApp instance per page: it owns the ReviewSession, the slice
 * view state and the canvases, and re-renders from session state changes.
 * Everything effectful (API client, PNG decoding, timer intervals) is
 * injectable so tests can drive the full keyboard-to-POST path headlessly.
 */

import type { Axis, PrCurvePayload, SlicePayload, Verdict } from './api.js';
import { ApiClient } from './api.js';
import type { OverlayName, RawImage } from './overlay.js';
import { composeSlice } from './overlay.js';
import type { ReviewApi, SessionState } from './session.js';
import { ReviewSession } from './session.js';
import { statsPanelModel } from './stats.js';
import { SliceView } from './viewer.js';

const VERDICT_KEYS: Record<string, Verdict> = {
  m: 'merge',
  n: 'no_merge',
  i: 'indeterminate',
};

const OVERLAY_KEYS: Record<string, OverlayName> = { '1': 'a', '2': 'b', '3': 'synapse' };

const SLICE_DISPLAY_PX = 462; // upscale target; actual size snaps to an integer multiple

/** Everything the page needs from the server; ApiClient satisfies this. */
export type ConsoleApi = ReviewApi & {
  slice(candidateId: string, axis: Axis, index: number): Promise<SlicePayload>;
  evalPr(): Promise<PrCurvePayload>;
};

export interface BootOptions {
  doc?: Document;
  api?: ConsoleApi;
  decodePng?: (b64: string) => Promise<RawImage>;
  renewIntervalMs?: number;
  retryBaseMs?: number;
  retryMaxMs?: number;
}

/** Decode a base64 PNG into raw RGBA pixels at native resolution. */
async function decodePngBrowser(b64: string): Promise<RawImage> {
  const raw = atob(b64);
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  const bitmap = await createImageBitmap(new Blob([bytes], { type: 'image/png' }));
  const canvas = document.createElement('canvas');
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext('2d');
  if (!ctx) throw new Error('2d canvas unavailable');
  ctx.drawImage(bitmap, 0, 0);
  const img = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { width: img.width, height: img.height, data: img.data };
}

function el<T extends HTMLElement>(doc: Document, id: string): T {
  const node = doc.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class ConsoleApp {
  readonly doc: Document;
  readonly api: ConsoleApi;
  readonly view = new SliceView();
  session: ReviewSession | null = null;

  private readonly decodePng: (b64: string) => Promise<RawImage>;
  private readonly opts: BootOptions;
  private lastCandidateId: string | null = null;
  private lastPayload: SlicePayload | null = null;
  private lastGray: RawImage | null = null;
  private sliceToken = 0;
  private prLoaded = false;

  constructor(options: BootOptions = {}) {
    this.opts = options;
    this.doc = options.doc ?? document;
    this.api = options.api ?? new ApiClient('');
    this.decodePng = options.decodePng ?? decodePngBrowser;
    this.bindStartForm();
    this.bindControls();
    this.doc.addEventListener('keydown', (e) => this.onKey(e as KeyboardEvent));
  }

  // ------------------------------------------------------------ session

  startSession(reviewer: string, workflow: string): void {
    this.session?.stop();
    this.session = new ReviewSession({
      api: this.api,
      reviewer,
      workflow,
      renewIntervalMs: this.opts.renewIntervalMs,
      retryBaseMs: this.opts.retryBaseMs,
      retryMaxMs: this.opts.retryMaxMs,
    });
    this.session.subscribe((s) => this.render(s));
    el(this.doc, 'startPane').hidden = true;
    el(this.doc, 'reviewPane').hidden = false;
    void this.session.start();
    void this.loadPrCurve();
  }

  private bindStartForm(): void {
    const form = el<HTMLFormElement>(this.doc, 'startForm');
    form.addEventListener('submit', (e) => {
      e.preventDefault();
      const reviewer = el<HTMLInputElement>(this.doc, 'reviewerInput').value.trim();
      if (!reviewer) return;
      const workflow = el<HTMLSelectElement>(this.doc, 'workflowSelect').value;
      this.startSession(reviewer, workflow);
    });
  }

  private bindControls(): void {
    for (const [id, verdict] of [
      ['btnMerge', 'merge'],
      ['btnNoMerge', 'no_merge'],
      ['btnIndeterminate', 'indeterminate'],
    ] as Array<[string, Verdict]>) {
      el(this.doc, id).addEventListener('click', () => void this.session?.submit(verdict));
    }
    for (const axis of ['x', 'y', 'z'] as const) {
      el(this.doc, `axis-${axis}`).addEventListener('click', () => this.setAxis(axis));
    }
    for (const [id, name] of [
      ['toggleA', 'a'],
      ['toggleB', 'b'],
      ['toggleSynapse', 'synapse'],
    ] as Array<[string, OverlayName]>) {
      el<HTMLInputElement>(this.doc, id).addEventListener('change', () => {
        this.view.toggle(name);
        this.redraw();
      });
    }
    const canvas = el<HTMLCanvasElement>(this.doc, 'sliceCanvas');
    canvas.addEventListener('wheel', (e) => {
      e.preventDefault();
      this.stepSlice((e as WheelEvent).deltaY > 0 ? 1 : -1);
    });
  }

  private onKey(e: KeyboardEvent): void {
    const target = e.target as HTMLElement | null;
    if (target && ['INPUT', 'TEXTAREA', 'SELECT'].includes(target.tagName)) return;
    if (e.metaKey || e.ctrlKey || e.altKey) return;
    const key = e.key.toLowerCase();
    if (key in VERDICT_KEYS) {
      e.preventDefault();
      void this.session?.submit(VERDICT_KEYS[key]);
      return;
    }
    if (key in OVERLAY_KEYS) {
      e.preventDefault();
      const name = OVERLAY_KEYS[key];
      this.view.toggle(name);
      this.syncToggleBoxes();
      this.redraw();
      return;
    }
    if (key === 'x' || key === 'y' || key === 'z') {
      e.preventDefault();
      this.setAxis(key);
      return;
    }
    switch (e.key) {
      case 'ArrowRight':
      case 'ArrowUp':
        e.preventDefault();
        this.stepSlice(1);
        break;
      case 'ArrowLeft':
      case 'ArrowDown':
        e.preventDefault();
        this.stepSlice(-1);
        break;
    }
  }

  // ------------------------------------------------------------ slices

  private setAxis(axis: 'x' | 'y' | 'z'): void {
    if (this.view.axis === axis) return;
    this.view.setAxis(axis);
    this.updateSliceMeta();
    void this.loadSlice();
  }

  private stepSlice(delta: number): void {
    const before = this.view.index;
    this.view.step(delta);
    if (this.view.index !== before) {
      this.updateSliceMeta();
      void this.loadSlice();
    }
  }

  private async loadSlice(): Promise<void> {
    const candidate = this.session?.getState().candidate;
    if (!candidate) return;
    const token = ++this.sliceToken;
    let payload: SlicePayload;
    try {
      payload = await this.api.slice(candidate.id, this.view.axis, this.view.index);
    } catch {
      this.setSliceNote('slice unavailable');
      return;
    }
    if (token !== this.sliceToken) return; // superseded by a newer request
    const firstEdge = this.view.edge === 0;
    this.view.setEdge(payload.edge);
    if (firstEdge) {
      // now that the cube extent is known, start at the contact plane
      this.view.center();
    }
    if (payload.index !== this.view.index) {
      void this.loadSlice();
      return;
    }
    let gray: RawImage;
    try {
      gray = await this.decodePng(payload.png);
    } catch {
      this.setSliceNote('could not decode slice image');
      return;
    }
    if (token !== this.sliceToken) return;
    this.lastPayload = payload;
    this.lastGray = gray;
    this.setSliceNote('');
    this.updateSliceMeta();
    this.redraw();
  }

  private redraw(): void {
    if (!this.lastGray || !this.lastPayload) return;
    const composed = composeSlice(this.lastGray, this.lastPayload.masks, this.view.toggles);
    const canvas = el<HTMLCanvasElement>(this.doc, 'sliceCanvas');
    const scale = Math.max(1, Math.floor(SLICE_DISPLAY_PX / composed.width));
    canvas.width = composed.width * scale;
    canvas.height = composed.height * scale;
    const ctx = canvas.getContext('2d');
    if (!ctx) return;
    const stage = this.doc.createElement('canvas');
    stage.width = composed.width;
    stage.height = composed.height;
    const sctx = stage.getContext('2d');
    if (!sctx) return;
    sctx.putImageData(new ImageData(composed.data, composed.width, composed.height), 0, 0);
    // nearest-neighbour upscale: served pixels only, just bigger
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(stage, 0, 0, canvas.width, canvas.height);
  }

  private updateSliceMeta(): void {
    const limit = this.view.edge > 0 ? this.view.edge - 1 : '?';
    el(this.doc, 'sliceMeta').textContent =
      `axis ${this.view.axis} · slice ${this.view.index} / ${limit}`;
    for (const axis of ['x', 'y', 'z'] as const) {
      el(this.doc, `axis-${axis}`).classList.toggle('active', this.view.axis === axis);
    }
  }

  private syncToggleBoxes(): void {
    el<HTMLInputElement>(this.doc, 'toggleA').checked = this.view.toggles.a;
    el<HTMLInputElement>(this.doc, 'toggleB').checked = this.view.toggles.b;
    el<HTMLInputElement>(this.doc, 'toggleSynapse').checked = this.view.toggles.synapse;
  }

  private setSliceNote(text: string): void {
    el(this.doc, 'sliceNote').textContent = text;
  }

  // ------------------------------------------------------------ rendering

  private render(s: SessionState): void {
    this.renderBanner(s);
    this.renderQueue(s);
    this.renderCandidate(s);
    this.renderVerdictButtons(s);
    this.renderCompletion(s);
  }

  private renderBanner(s: SessionState): void {
    const banner = el(this.doc, 'offlineBanner');
    if (s.phase === 'offline') {
      banner.hidden = false;
      const secs = s.retryInMs === null ? '?' : Math.ceil(s.retryInMs / 1000).toString();
      el(this.doc, 'offlineMsg').textContent =
        `server unreachable (${s.error ?? 'no response'}), retrying in ${secs}s`;
    } else {
      banner.hidden = true;
    }
    const err = el(this.doc, 'sessionError');
    if (s.error && s.phase !== 'offline') {
      err.hidden = false;
      err.textContent = s.error;
    } else {
      err.hidden = true;
    }
  }

  private renderQueue(s: SessionState): void {
    const panel = el(this.doc, 'statsPanel');
    if (!s.queue) {
      panel.hidden = true;
      return;
    }
    panel.hidden = false;
    const model = statsPanelModel(s.queue);
    el(this.doc, 'statDecided').textContent = String(model.decided);
    el(this.doc, 'statPending').textContent = String(model.pending);
    el(this.doc, 'statTotal').textContent = String(model.total);
    el(this.doc, 'statRate').textContent = model.mergeRate;
    el(this.doc, 'statVerdicts').textContent =
      `${model.verdicts.merge} merge · ${model.verdicts.no_merge} no merge · ` +
      `${model.verdicts.indeterminate} unsure`;
  }

  private renderCandidate(s: SessionState): void {
    const c = s.candidate;
    if (!c) {
      if (s.phase !== 'submitting') this.lastCandidateId = null;
      return;
    }
    el(this.doc, 'candId').textContent = c.id;
    el(this.doc, 'candBodies').textContent = `${c.a} ↔ ${c.b}`;
    el(this.doc, 'candContact').textContent = `${c.contact_voxels} contact voxels`;
    const scores = Object.entries(c.scores)
      .map(([k, v]) => `${k} ${v.toFixed(3)}`)
      .join(' · ');
    el(this.doc, 'candScores').textContent = scores || 'unscored';
    el(this.doc, 'leaseChip').textContent = s.lease
      ? `leased to ${s.lease.reviewer} until ${s.lease.expires_at.slice(11, 19)}`
      : '';
    if (c.id !== this.lastCandidateId) {
      this.lastCandidateId = c.id;
      if (this.view.edge > 0) this.view.center();
      this.updateSliceMeta();
      void this.loadSlice();
    }
  }

  private renderVerdictButtons(s: SessionState): void {
    const enabled = s.phase === 'reviewing';
    for (const id of ['btnMerge', 'btnNoMerge', 'btnIndeterminate']) {
      el<HTMLButtonElement>(this.doc, id).disabled = !enabled;
    }
  }

  private renderCompletion(s: SessionState): void {
    const pane = el(this.doc, 'completionPane');
    const review = el(this.doc, 'reviewBody');
    if (s.phase !== 'done') {
      pane.hidden = true;
      review.hidden = false;
      return;
    }
    pane.hidden = false;
    review.hidden = true;
    const q = s.queue;
    el(this.doc, 'completionStats').textContent = q
      ? `${q.decided} of ${q.total} candidates decided · merge rate ` +
        `${statsPanelModel(q).mergeRate} · ${s.submitted.length} submitted this sitting`
      : `${s.submitted.length} submitted this sitting`;
    void this.loadPrCurve(true);
  }

  // ------------------------------------------------------------ PR curve

  private async loadPrCurve(force = false): Promise<void> {
    if (this.prLoaded && !force) return;
    let pr: PrCurvePayload;
    try {
      pr = await this.api.evalPr();
    } catch {
      el(this.doc, 'prBlock').hidden = true;
      return;
    }
    this.prLoaded = true;
    const block = el(this.doc, 'prBlock');
    if (!pr.available || !pr.points || pr.points.length === 0) {
      block.hidden = true;
      return;
    }
    block.hidden = false;
    el(this.doc, 'prAuprc').textContent = `AUPRC ${(pr.auprc ?? 0).toFixed(4)}`;
    this.drawPrCurve(pr.points);
  }

  private drawPrCurve(points: Array<[number, number]>): void {
    const canvas = el<HTMLCanvasElement>(this.doc, 'prCanvas');
    const ctx = canvas.getContext('2d');
    if (!ctx) return;
    const w = canvas.width;
    const h = canvas.height;
    const pad = 14;
    ctx.clearRect(0, 0, w, h);
    ctx.strokeStyle = '#39415a';
    ctx.lineWidth = 1;
    ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
    ctx.strokeStyle = '#6ee7b7';
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    const sorted = [...points].sort((p, q) => p[0] - q[0]);
    sorted.forEach(([recall, precision], i) => {
      const x = pad + recall * (w - 2 * pad);
      const y = h - pad - precision * (h - 2 * pad);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}

export function boot(options: BootOptions = {}): ConsoleApp {
  return new ConsoleApp(options);
}
