/**
 * Pure pixel compositing for the canvas layers. Everything here works on
 * plain arrays so it can be tested without a DOM; the canvas code in
 * main.ts only copies results into ImageData.
 */

import { classColor } from './palette.js';
import type { ImageDims } from './types.js';

export interface Transform {
  zoom: number;
  panX: number;
  panY: number;
}

/** Image pixel coordinates -> screen coordinates. */
export function imageToScreen(t: Transform, x: number, y: number) {
  return { x: x * t.zoom + t.panX, y: y * t.zoom + t.panY };
}

/** Screen coordinates -> continuous image coordinates. */
export function screenToImage(t: Transform, x: number, y: number) {
  return { x: (x - t.panX) / t.zoom, y: (y - t.panY) / t.zoom };
}

/** Zoom about a fixed screen point so the pixel under the cursor stays put. */
export function zoomAt(t: Transform, screenX: number, screenY: number, factor: number): Transform {
  const zoom = Math.min(64, Math.max(1 / 16, t.zoom * factor));
  const applied = zoom / t.zoom;
  return {
    zoom,
    panX: screenX - (screenX - t.panX) * applied,
    panY: screenY - (screenY - t.panY) * applied,
  };
}

/**
 * Blend a class grid over an RGBA base at the given opacity, in place.
 * Class 0 pixels are left untouched.
 */
export function blendClassGrid(
  rgba: Uint8ClampedArray,
  grid: Uint8Array,
  dims: ImageDims,
  alpha: number,
): void {
  if (alpha < 0 || alpha > 1) {
    throw new Error(`alpha must be in [0,1], got ${alpha}`);
  }
  if (grid.length !== dims.width * dims.height) {
    throw new Error('class grid does not match image dims');
  }
  for (let i = 0; i < grid.length; i++) {
    const cls = grid[i]!;
    if (cls === 0) {
      continue;
    }
    const { r, g, b } = classColor(cls);
    const o = i * 4;
    rgba[o] = rgba[o]! * (1 - alpha) + r * alpha;
    rgba[o + 1] = rgba[o + 1]! * (1 - alpha) + g * alpha;
    rgba[o + 2] = rgba[o + 2]! * (1 - alpha) + b * alpha;
  }
}

/** Grayscale plane (0-255) -> opaque RGBA buffer. */
export function grayToRgba(plane: Uint8Array): Uint8ClampedArray {
  const out = new Uint8ClampedArray(plane.length * 4);
  for (let i = 0; i < plane.length; i++) {
    const v = plane[i]!;
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/**
 * Compose the visible layers into one RGBA frame: image, then the
 * segmentation overlay at its opacity, then labels at full strength.
 */
export function composeFrame(
  base: Uint8ClampedArray,
  dims: ImageDims,
  segmentation: Uint8Array | null,
  labels: Uint8Array | null,
  segmentationAlpha: number,
  showLabels: boolean,
): Uint8ClampedArray {
  const frame = new Uint8ClampedArray(base);
  if (segmentation && segmentationAlpha > 0) {
    blendClassGrid(frame, segmentation, dims, segmentationAlpha);
  }
  if (labels && showLabels) {
    blendClassGrid(frame, labels, dims, 0.9);
  }
  return frame;
}
