/**
 * Canvas application: wires the pure modules to the DOM. Holds no business
 * logic of its own; every decision lives in state.ts / rle.ts / overlay.ts
 * so it can be tested headless, and every displayed number comes from the
 * API.
 */

import { ApiError, WorkbenchClient, toArrayBuffer } from './api.js';
import { composeFrame, grayToRgba, screenToImage, zoomAt, type Transform } from './overlay.js';
import { cssColor } from './palette.js';
import { SessionState } from './state.js';
import type { BrushStroke } from './types.js';

const client = new WorkbenchClient('');
const session = new SessionState();

let projectId: string | null = null;
let transform: Transform = { zoom: 8, panX: 0, panY: 0 };
let baseRgba: Uint8ClampedArray | null = null;
let labelGrid: Uint8Array | null = null;
let segmentationGrid: Uint8Array | null = null;
let vizBitmap: ImageBitmap | null = null;
let activeStroke: BrushStroke | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

const canvas = el<HTMLCanvasElement>('view');
const vizCanvas = el<HTMLCanvasElement>('viz');
const vizNote = el<HTMLDivElement>('viz-note');
const trainButton = el<HTMLButtonElement>('train');
const undoButton = el<HTMLButtonElement>('undo');
const statusLine = el<HTMLDivElement>('status');
const toasts = el<HTMLDivElement>('toasts');

function toast(message: string, kind: 'info' | 'error' = 'info'): void {
  const node = document.createElement('div');
  node.className = `toast ${kind}`;
  node.textContent = message;
  toasts.appendChild(node);
  setTimeout(() => node.remove(), 5000);
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    const detail = typeof err.detail === 'string' ? err.detail : JSON.stringify(err.detail);
    if (err.status === 409) {
      return `out of date (server is at revision ${err.currentRevision}); retry`;
    }
    return `${err.status}: ${detail}`;
  }
  return String(err);
}

// -- decoding helpers ---------------------------------------------------------

/** Draw PNG bytes offscreen and return the per-pixel red channel. */
async function pngToClassGrid(bytes: Uint8Array): Promise<{ grid: Uint8Array; width: number; height: number }> {
  const bitmap = await createImageBitmap(new Blob([bytes as BlobPart], { type: 'image/png' }));
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext('2d');
  if (!ctx) {
    throw new Error('no 2d context');
  }
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const grid = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < grid.length; i++) {
    grid[i] = data[i * 4]!;
  }
  return { grid, width: bitmap.width, height: bitmap.height };
}

// -- rendering ------------------------------------------------------------------

function render(): void {
  const ctx = canvas.getContext('2d');
  if (!ctx) {
    return;
  }
  ctx.imageSmoothingEnabled = false;
  ctx.fillStyle = '#222';
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (!baseRgba || !session.dims) {
    return;
  }
  const dims = session.dims;
  const frame = composeFrame(
    session.view.layers.image ? baseRgba : new Uint8ClampedArray(baseRgba.length).fill(255),
    dims,
    segmentationGrid,
    labelGrid,
    session.view.layers.segmentationAlpha,
    session.view.layers.labels,
  );
  const imageData = new ImageData(new Uint8ClampedArray(frame), dims.width, dims.height);
  const off = new OffscreenCanvas(dims.width, dims.height);
  const offCtx = off.getContext('2d');
  if (!offCtx) {
    return;
  }
  offCtx.putImageData(imageData, 0, 0);
  ctx.save();
  ctx.translate(transform.panX, transform.panY);
  ctx.scale(transform.zoom, transform.zoom);
  ctx.drawImage(off, 0, 0);
  ctx.restore();

  const vizCtx = vizCanvas.getContext('2d');
  if (vizCtx) {
    vizCtx.imageSmoothingEnabled = false;
    vizCtx.fillStyle = '#222';
    vizCtx.fillRect(0, 0, vizCanvas.width, vizCanvas.height);
    if (vizBitmap && session.view.layers.featureViz) {
      // the same transform keeps the viz pixel-aligned with the image
      vizCtx.save();
      vizCtx.translate(transform.panX, transform.panY);
      vizCtx.scale(transform.zoom, transform.zoom);
      vizCtx.drawImage(vizBitmap, 0, 0);
      vizCtx.restore();
    }
  }

  const stale = session.overlayStale() ? ' (overlay stale, retrain)' : '';
  statusLine.textContent = projectId
    ? `project ${projectId} @ revision ${session.revision}${stale}`
    : 'create a project to begin';
  trainButton.disabled = !session.canTrain() || session.mutating;
  trainButton.title = session.trainGateHint() ?? 'train on the current labels';
  undoButton.disabled = session.strokeCount === 0 || session.mutating;
}

// -- server sync ------------------------------------------------------------------

async function refreshSegmentation(): Promise<void> {
  if (!projectId) {
    return;
  }
  try {
    const payload = await client.getSegmentation(projectId);
    if (session.isStale(payload.revision)) {
      return; // an older frame must never replace a newer one
    }
    const decoded = await pngToClassGrid(payload.bytes);
    segmentationGrid = decoded.grid;
    session.markSegmentationFetched(payload.revision);
  } catch (err) {
    if (err instanceof ApiError && err.status === 404) {
      segmentationGrid = null; // nothing trained yet
    } else {
      toast(describeError(err), 'error');
    }
  }
  render();
}

async function refreshViz(): Promise<void> {
  if (!projectId || !session.view.layers.featureViz) {
    return;
  }
  try {
    const info = await client.getProject(projectId);
    if (info.has_deep && info.deep_k !== null && info.deep_k < 3) {
      vizNote.textContent = `feature view needs at least 3 channels, this stack has ${info.deep_k}`;
      vizBitmap = null;
      render();
      return;
    }
    const payload = await client.getFeatureViz(projectId);
    vizBitmap = await createImageBitmap(new Blob([payload.bytes as BlobPart], { type: 'image/png' }));
    vizNote.textContent = '';
  } catch (err) {
    if (err instanceof ApiError && (err.status === 404 || err.status === 422)) {
      vizNote.textContent = 'extract features first';
      vizBitmap = null;
    } else {
      toast(describeError(err), 'error');
    }
  }
  render();
}

async function pushStroke(stroke: BrushStroke): Promise<void> {
  if (!projectId) {
    return;
  }
  const records = session.addStroke(stroke);
  if (records.length === 0 || !labelGrid || !session.dims) {
    return;
  }
  for (const record of records) {
    labelGrid.fill(
      record.class,
      record.row * session.dims.width + record.start,
      record.row * session.dims.width + record.start + record.len,
    );
  }
  render();
  if (!session.beginMutation()) {
    toast('another change is still in flight', 'error');
    return;
  }
  try {
    const response = await client.putLabels(projectId, session.revision, records);
    session.acceptRevision(response.revision);
  } catch (err) {
    toast(describeError(err), 'error');
  } finally {
    session.endMutation();
    render();
  }
}

async function train(): Promise<void> {
  if (!projectId || !session.beginMutation()) {
    return;
  }
  try {
    const view = session.view;
    const response = await client.train(projectId, session.revision, {
      kind: view.classifierKind,
      use_deep: view.useDeep,
      ...(view.j !== null ? { j: view.j } : {}),
    });
    session.acceptRevision(response.revision);
    toast(`trained ${response.metrics.kind}: accuracy ${response.metrics.train_accuracy.toFixed(3)}`);
  } catch (err) {
    toast(describeError(err), 'error');
    return;
  } finally {
    session.endMutation();
  }
  await refreshSegmentation();
}

async function undo(): Promise<void> {
  if (!projectId) {
    return;
  }
  const records = session.undoStroke();
  if (records === null || !session.beginMutation()) {
    return;
  }
  try {
    const response = await client.putLabels(projectId, session.revision, records, true);
    session.acceptRevision(response.revision);
    const labels = await client.getLabels(projectId);
    if (!session.isStale(labels.revision)) {
      const decoded = await pngToClassGrid(labels.bytes);
      labelGrid = decoded.grid;
    }
  } catch (err) {
    toast(describeError(err), 'error');
  } finally {
    session.endMutation();
    render();
  }
}

// -- inputs --------------------------------------------------------------------

async function onImageChosen(file: File): Promise<void> {
  const bytes = new Uint8Array(await file.arrayBuffer());
  if (!projectId) {
    const classCount = Number(el<HTMLInputElement>('classes').value);
    const created = await client.createProject(file.name, classCount);
    projectId = created.id;
    session.acceptRevision(created.revision);
  }
  try {
    const response = await client.uploadImage(projectId, bytes, session.revision);
    session.acceptRevision(response.revision);
  } catch (err) {
    toast(describeError(err), 'error');
    return;
  }
  const bitmap = await createImageBitmap(new Blob([bytes as BlobPart]));
  const off = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = off.getContext('2d');
  if (!ctx) {
    return;
  }
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const gray = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = data[i * 4]!;
  }
  session.dims = { width: bitmap.width, height: bitmap.height };
  baseRgba = grayToRgba(gray);
  labelGrid = new Uint8Array(bitmap.width * bitmap.height);
  segmentationGrid = null;
  render();
}

async function onFeaturesChosen(file: File): Promise<void> {
  if (!projectId) {
    toast('load an image first', 'error');
    return;
  }
  const bytes = new Uint8Array(await file.arrayBuffer());
  try {
    const response = await fetch(`/projects/${projectId}/deep-features?revision=${session.revision}`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/octet-stream' },
      body: toArrayBuffer(bytes),
    });
    if (response.status === 202) {
      const { job } = (await response.json()) as { job: string };
      toast('upsampling features…');
      const finished = await client.pollJob(job);
      const result = finished.result as { revision: number; k: number };
      session.acceptRevision(result.revision);
      toast(`attached ${result.k} feature channels`);
    } else if (response.ok) {
      const result = (await response.json()) as { revision: number; k: number };
      session.acceptRevision(result.revision);
      toast(`attached ${result.k} feature channels`);
    } else {
      const body = (await response.json()) as { detail?: unknown };
      throw new ApiError(response.status, body.detail ?? null);
    }
  } catch (err) {
    toast(describeError(err), 'error');
    return;
  }
  await refreshViz();
  render();
}

function canvasPoint(event: PointerEvent): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  return screenToImage(transform, event.clientX - rect.left, event.clientY - rect.top);
}

function wireInputs(): void {
  el<HTMLInputElement>('image-file').addEventListener('change', (event) => {
    const file = (event.target as HTMLInputElement).files?.[0];
    if (file) {
      void onImageChosen(file);
    }
  });
  el<HTMLInputElement>('features-file').addEventListener('change', (event) => {
    const file = (event.target as HTMLInputElement).files?.[0];
    if (file) {
      void onFeaturesChosen(file);
    }
  });

  const classButtons = el<HTMLDivElement>('class-buttons');
  const classCountInput = el<HTMLInputElement>('classes');
  const rebuildClassButtons = () => {
    classButtons.replaceChildren();
    const count = Number(classCountInput.value);
    for (let cls = 1; cls <= count; cls++) {
      const button = document.createElement('button');
      button.textContent = `class ${cls}`;
      button.style.borderColor = cssColor(cls);
      button.className = session.view.activeClass === cls ? 'active' : '';
      button.addEventListener('click', () => {
        session.view.activeClass = cls;
        rebuildClassButtons();
      });
      classButtons.appendChild(button);
    }
  };
  classCountInput.addEventListener('change', rebuildClassButtons);
  rebuildClassButtons();

  canvas.addEventListener('pointerdown', (event) => {
    if (event.button === 1) {
      return; // middle button pans via pointermove
    }
    if (!session.dims) {
      return;
    }
    canvas.setPointerCapture(event.pointerId);
    const radius = Number(el<HTMLInputElement>('radius').value);
    activeStroke = {
      classId: session.view.activeClass,
      points: [canvasPoint(event)],
      radius,
    };
  });
  canvas.addEventListener('pointermove', (event) => {
    if (event.buttons === 4) {
      transform = { ...transform, panX: transform.panX + event.movementX, panY: transform.panY + event.movementY };
      render();
      return;
    }
    if (activeStroke) {
      activeStroke.points.push(canvasPoint(event));
    }
  });
  canvas.addEventListener('pointerup', () => {
    if (activeStroke) {
      const stroke = activeStroke;
      activeStroke = null;
      void pushStroke(stroke);
    }
  });
  canvas.addEventListener(
    'wheel',
    (event) => {
      event.preventDefault();
      const rect = canvas.getBoundingClientRect();
      transform = zoomAt(
        transform,
        event.clientX - rect.left,
        event.clientY - rect.top,
        event.deltaY < 0 ? 1.25 : 0.8,
      );
      render();
    },
    { passive: false },
  );

  trainButton.addEventListener('click', () => void train());
  undoButton.addEventListener('click', () => void undo());

  el<HTMLInputElement>('alpha').addEventListener('input', (event) => {
    session.view.layers.segmentationAlpha = Number((event.target as HTMLInputElement).value);
    render();
  });
  el<HTMLInputElement>('use-deep').addEventListener('change', (event) => {
    session.view.useDeep = (event.target as HTMLInputElement).checked;
  });
  el<HTMLSelectElement>('kind').addEventListener('change', (event) => {
    session.view.classifierKind = (event.target as HTMLSelectElement).value;
  });
  el<HTMLInputElement>('j-slider').addEventListener('change', (event) => {
    const value = Number((event.target as HTMLInputElement).value);
    session.view.j = value > 0 ? value : null;
  });
  el<HTMLInputElement>('show-viz').addEventListener('change', (event) => {
    session.view.layers.featureViz = (event.target as HTMLInputElement).checked;
    void refreshViz();
  });
  el<HTMLInputElement>('show-labels').addEventListener('change', (event) => {
    session.view.layers.labels = (event.target as HTMLInputElement).checked;
    render();
  });
}

wireInputs();
render();
