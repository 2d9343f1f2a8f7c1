/** Fixed colorblind-safe class colors (Okabe-Ito cycle). Class 0 is unlabelled. */

export interface Rgb {
  r: number;
  g: number;
  b: number;
}

const CYCLE: Rgb[] = [
  { r: 230, g: 159, b: 0 },   // orange
  { r: 86, g: 180, b: 233 },  // sky blue
  { r: 0, g: 158, b: 115 },   // bluish green
  { r: 240, g: 228, b: 66 },  // yellow
  { r: 0, g: 114, b: 178 },   // blue
  { r: 213, g: 94, b: 0 },    // vermillion
  { r: 204, g: 121, b: 167 }, // reddish purple
  { r: 153, g: 153, b: 153 }, // grey
];

/** Color for a class id >= 1; the cycle repeats past its length. */
export function classColor(classId: number): Rgb {
  if (classId < 1) {
    throw new Error(`class ids start at 1, got ${classId}`);
  }
  const color = CYCLE[(classId - 1) % CYCLE.length];
  if (!color) {
    throw new Error('palette cycle is empty');
  }
  return color;
}

export function cssColor(classId: number): string {
  const { r, g, b } = classColor(classId);
  return `rgb(${r}, ${g}, ${b})`;
}

export const PALETTE_SIZE = CYCLE.length;
