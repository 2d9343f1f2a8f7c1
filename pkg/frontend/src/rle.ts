/**
 * Stroke rasterization: turn a disc-swept polyline into the run-length
 * label records the server stores. Coordinates outside the image are
 * clamped to its edge rather than dropped, so a gesture that wanders off
 * screen still paints along the border.
 */

import type { BrushStroke, ImageDims, LabelRecord } from './types.js';

/** Integer offsets (dx, dy) with dx^2 + dy^2 <= radius^2. */
export function discOffsets(radius: number): Array<{ dx: number; dy: number }> {
  const r = Math.max(0, Math.floor(radius));
  const out: Array<{ dx: number; dy: number }> = [];
  for (let dy = 0 - r; dy <= r; dy++) {
    for (let dx = 0 - r; dx <= r; dx++) {
      if (dx * dx + dy * dy <= r * r) {
        out.push({ dx, dy });
      }
    }
  }
  return out;
}

function clamp(value: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, value));
}

/**
 * Rasterize one stroke into sorted, merged label records.
 *
 * Every polyline segment is sampled densely enough that consecutive disc
 * stamps overlap, so the painted region has no gaps at any radius.
 */
export function rasterizeStroke(stroke: BrushStroke, dims: ImageDims): LabelRecord[] {
  if (stroke.classId < 1) {
    throw new Error(`strokes must use a class id >= 1, got ${stroke.classId}`);
  }
  if (stroke.radius < 0) {
    throw new Error(`radius must be >= 0, got ${stroke.radius}`);
  }
  if (stroke.points.length === 0) {
    return [];
  }

  const centers = stroke.points.map((p) => ({
    x: clamp(p.x, 0, dims.width - 1),
    y: clamp(p.y, 0, dims.height - 1),
  }));

  const offsets = discOffsets(stroke.radius);
  const painted = new Set<number>();
  const stamp = (x: number, y: number) => {
    const cx = Math.round(x);
    const cy = Math.round(y);
    for (const { dx, dy } of offsets) {
      const px = cx + dx;
      const py = cy + dy;
      if (px >= 0 && px < dims.width && py >= 0 && py < dims.height) {
        painted.add(py * dims.width + px);
      }
    }
  };

  let previous = centers[0]!;
  stamp(previous.x, previous.y);
  for (const point of centers.slice(1)) {
    const steps = Math.max(
      1,
      Math.ceil(Math.max(Math.abs(point.x - previous.x), Math.abs(point.y - previous.y)) * 2),
    );
    for (let s = 1; s <= steps; s++) {
      const t = s / steps;
      stamp(previous.x + (point.x - previous.x) * t, previous.y + (point.y - previous.y) * t);
    }
    previous = point;
  }

  return runsFromPixels(painted, stroke.classId, dims.width);
}

/** Collapse a pixel set into per-row runs, merging adjacent columns. */
function runsFromPixels(pixels: Set<number>, classId: number, width: number): LabelRecord[] {
  const sorted = Array.from(pixels).sort((a, b) => a - b);
  const records: LabelRecord[] = [];
  for (const index of sorted) {
    const row = Math.floor(index / width);
    const col = index % width;
    const last = records[records.length - 1];
    if (last && last.row === row && last.start + last.len === col) {
      last.len += 1;
    } else {
      records.push({ class: classId, row, start: col, len: 1 });
    }
  }
  return records;
}

/** Apply records to a class grid, newest stroke winning. */
export function paintRecords(
  grid: Uint8Array,
  records: LabelRecord[],
  dims: ImageDims,
): void {
  for (const record of records) {
    const base = record.row * dims.width + record.start;
    for (let i = 0; i < record.len; i++) {
      grid[base + i] = record.class;
    }
  }
}

/** Rebuild the full record list for a stroke history (used by undo). */
export function recordsForStrokes(strokes: BrushStroke[], dims: ImageDims): LabelRecord[] {
  const grid = new Uint8Array(dims.width * dims.height);
  for (const stroke of strokes) {
    paintRecords(grid, rasterizeStroke(stroke, dims), dims);
  }
  const records: LabelRecord[] = [];
  for (let row = 0; row < dims.height; row++) {
    let runStart = -1;
    let runClass = 0;
    for (let col = 0; col <= dims.width; col++) {
      const value = col < dims.width ? grid[row * dims.width + col]! : 0;
      if (value === runClass && runStart >= 0) {
        continue;
      }
      if (runStart >= 0 && runClass !== 0) {
        records.push({ class: runClass, row, start: runStart, len: col - runStart });
      }
      runStart = value === 0 ? -1 : col;
      runClass = value;
    }
  }
  return records;
}
