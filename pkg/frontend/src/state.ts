/**
 * Client-side session state: the view, the stroke history, and the
 * bookkeeping that keeps a polling UI coherent. Two rules are enforced
 * here rather than in the DOM layer so they can be unit tested:
 *
 * - Revision monotonicity: a response stamped with an older revision than
 *   the latest one seen is discarded instead of rendered.
 * - At most one mutation is in flight per project at any time.
 */

import type { BrushStroke, ImageDims, LabelRecord, ViewState } from './types.js';
import { rasterizeStroke, recordsForStrokes } from './rle.js';

export function initialViewState(): ViewState {
  return {
    zoom: 1,
    pan: { x: 0, y: 0 },
    layers: { image: true, labels: true, segmentationAlpha: 0.5, featureViz: false },
    activeClass: 1,
    classifierKind: 'gbt',
    useDeep: false,
    j: null,
  };
}

export class SessionState {
  readonly view: ViewState = initialViewState();
  dims: ImageDims | null = null;

  private latestRevision = -1;
  private mutationInFlight = false;
  private strokes: BrushStroke[] = [];
  private labelledClasses = new Set<number>();
  /** Revision the currently displayed segmentation was trained at. */
  segmentationRevision: number | null = null;

  /** Record a revision from any server response; newer values win. */
  acceptRevision(revision: number): boolean {
    if (revision > this.latestRevision) {
      this.latestRevision = revision;
      return true;
    }
    return false;
  }

  get revision(): number {
    return this.latestRevision;
  }

  /** True when a response stamped at `revision` is older than what we know. */
  isStale(revision: number): boolean {
    return revision < this.latestRevision;
  }

  /** Try to claim the single mutation slot; the caller must release it. */
  beginMutation(): boolean {
    if (this.mutationInFlight) {
      return false;
    }
    this.mutationInFlight = true;
    return true;
  }

  endMutation(): void {
    this.mutationInFlight = false;
  }

  get mutating(): boolean {
    return this.mutationInFlight;
  }

  // -- stroke history -------------------------------------------------------

  /** Rasterize and remember a stroke; returns its records for the PUT. */
  addStroke(stroke: BrushStroke): LabelRecord[] {
    if (!this.dims) {
      throw new Error('no image loaded');
    }
    const records = rasterizeStroke(stroke, this.dims);
    if (records.length > 0) {
      this.strokes.push(stroke);
      this.labelledClasses.add(stroke.classId);
    }
    return records;
  }

  /**
   * Drop the newest stroke. Returns the full replacement record list the
   * server needs (a replace-all PUT), or null when there is nothing to undo.
   */
  undoStroke(): LabelRecord[] | null {
    if (!this.dims || this.strokes.length === 0) {
      return null;
    }
    this.strokes.pop();
    this.labelledClasses = new Set(this.strokes.map((s) => s.classId));
    return recordsForStrokes(this.strokes, this.dims);
  }

  get strokeCount(): number {
    return this.strokes.length;
  }

  /** Training needs at least two distinct labelled classes. */
  canTrain(): boolean {
    return this.labelledClasses.size >= 2;
  }

  trainGateHint(): string | null {
    return this.canTrain() ? null : 'label at least two classes first';
  }

  // -- overlay freshness ----------------------------------------------------

  markSegmentationFetched(revision: number): void {
    this.segmentationRevision = revision;
    this.acceptRevision(revision);
  }

  /** The overlay is stale once labels or image moved past its revision. */
  overlayStale(): boolean {
    return (
      this.segmentationRevision !== null &&
      this.segmentationRevision < this.latestRevision
    );
  }
}
