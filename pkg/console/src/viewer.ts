/** Slice navigation state: axis, clamped index, overlay toggles. */

import type { Axis } from './api.js';
import { allOverlaysOn, OverlayName, OverlayToggles } from './overlay.js';

function clamp(v: number, lo: number, hi: number): number {
  return Math.max(lo, Math.min(hi, v));
}

export class SliceView {
  axis: Axis = 'z';
  index = 0;
  edge = 0; // evidence cube extent; 0 until the first payload arrives
  toggles: OverlayToggles = allOverlaysOn();

  /** Record the cube extent and re-clamp; the index can never point outside it. */
  setEdge(edge: number): void {
    this.edge = edge;
    this.index = clamp(this.index, 0, Math.max(0, edge - 1));
  }

  /** Jump to the middle slice, where the contact point sits. */
  center(): void {
    this.index = Math.floor(this.edge / 2);
  }

  step(delta: number): void {
    if (this.edge <= 0) return;
    this.index = clamp(this.index + delta, 0, this.edge - 1);
  }

  setAxis(axis: Axis): void {
    this.axis = axis;
  }

  toggle(name: OverlayName): void {
    this.toggles = { ...this.toggles, [name]: !this.toggles[name] };
  }
}
