/** Shared types for the labeling front-end. */

/** One run of labelled pixels, the wire format of PUT /labels. */
export interface LabelRecord {
  class: number;
  row: number;
  start: number;
  len: number;
}

/** A brush gesture in image coordinates, before rasterization. */
export interface BrushStroke {
  classId: number;
  points: Array<{ x: number; y: number }>;
  radius: number;
}

export interface ImageDims {
  width: number;
  height: number;
}

export interface ProjectInfo {
  id: string;
  name: string;
  revision: number;
  class_count: number;
  class_names: string[];
  image: { height: number; width: number; channels: number } | null;
  labelled_count: number;
  has_deep: boolean;
  deep_k: number | null;
  has_model: boolean;
}

export interface TrainMetrics {
  kind: string;
  train_accuracy: number;
  [key: string]: unknown;
}

export interface JobRecord {
  id: string;
  status: 'queued' | 'running' | 'done' | 'error';
  result?: unknown;
  error?: string;
}

/** Everything the render loop needs to draw one frame. */
export interface ViewState {
  zoom: number;
  pan: { x: number; y: number };
  layers: {
    image: boolean;
    labels: boolean;
    segmentationAlpha: number;
    featureViz: boolean;
  };
  activeClass: number;
  classifierKind: string;
  useDeep: boolean;
  j: number | null;
}
