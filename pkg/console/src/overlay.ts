/**
 * Mask compositing for slice views.
 *
 * The server sends each mask as run-length spans over the row-major pixel
 * grid of the grayscale slice. Tinting touches exactly the pixels those runs
 * cover; nothing is resampled or smoothed, so the overlay can never disagree
 * with the served mask.
 */

import type { MaskRuns, SlicePayload } from './api.js';

export interface RawImage {
  width: number;
  height: number;
  data: Uint8ClampedArray; // RGBA, row-major
}

export type OverlayName = 'a' | 'b' | 'synapse';

export interface OverlayToggles {
  a: boolean;
  b: boolean;
  synapse: boolean;
}

// [r, g, b, alpha]; body a warm, body b cool, synapse proximity yellow
export const OVERLAY_TINTS: Record<OverlayName, [number, number, number, number]> = {
  a: [233, 69, 96, 0.45],
  b: [63, 167, 214, 0.45],
  synapse: [255, 209, 102, 0.4],
};

export function allOverlaysOn(): OverlayToggles {
  return { a: true, b: true, synapse: true };
}

/** Blend one tint over every pixel a mask's runs cover, in place. */
export function applyTint(image: RawImage, mask: MaskRuns, tint: [number, number, number, number]): void {
  const [rows, cols] = mask.shape;
  if (rows !== image.height || cols !== image.width) {
    throw new Error(`mask shape ${rows}x${cols} does not match image ${image.height}x${image.width}`);
  }
  const n = rows * cols;
  const [tr, tg, tb, alpha] = tint;
  const keep = 1 - alpha;
  for (const [start, length] of mask.runs) {
    if (start < 0 || length < 0 || start + length > n) {
      throw new Error(`mask run [${start}, ${length}] exceeds ${n} pixels`);
    }
    for (let i = start; i < start + length; i++) {
      const p = i * 4;
      image.data[p] = image.data[p] * keep + tr * alpha;
      image.data[p + 1] = image.data[p + 1] * keep + tg * alpha;
      image.data[p + 2] = image.data[p + 2] * keep + tb * alpha;
      image.data[p + 3] = 255;
    }
  }
}

/**
 * Compose the display image: the decoded grayscale pixels, then each enabled
 * overlay tinted over its run extents. With every toggle off the result is a
 * byte-for-byte copy of the grayscale input.
 */
export function composeSlice(
  gray: RawImage,
  masks: SlicePayload['masks'],
  toggles: OverlayToggles,
): RawImage {
  const out: RawImage = {
    width: gray.width,
    height: gray.height,
    data: new Uint8ClampedArray(gray.data),
  };
  for (const name of ['a', 'b', 'synapse'] as OverlayName[]) {
    if (toggles[name]) {
      applyTint(out, masks[name], OVERLAY_TINTS[name]);
    }
  }
  return out;
}
