/**
 * Display state for one case: which panel(s) are visible, the shared
 * zoom/pan, and the gate that keeps rating controls disabled until the
 * image has actually rendered.
 */

import type { CasePayload, Condition } from './api.js';
import type { DecodedImage } from './png.js';

export type DisplayMode = 'grayscale' | 'tdce' | 'split';

export interface WindowLevel {
  center: number;
  width: number;
}

/**
 * Fixed default covering the full 16-bit range. Conditions stay
 * comparable because every panel goes through the same mapping.
 */
export const DEFAULT_WINDOW: WindowLevel = { center: 32768, width: 65536 };

/**
 * Linear window: samples at or below center - width/2 map to 0, at or
 * above center + width/2 map to 255, linear in between.
 */
export function windowMap(
  samples: Uint16Array,
  wl: WindowLevel = DEFAULT_WINDOW,
): Uint8ClampedArray {
  if (!(wl.width >= 1)) throw new RangeError(`window width must be >= 1, got ${wl.width}`);
  const low = wl.center - wl.width / 2;
  const scale = 255 / wl.width;
  const out = new Uint8ClampedArray(samples.length);
  for (let i = 0; i < samples.length; i++) {
    out[i] = Math.round((samples[i] - low) * scale);
  }
  return out;
}

export interface RgbaImage {
  width: number;
  height: number;
  rgba: Uint8ClampedArray;
}

/** Windowed 8-bit RGBA, ready for a canvas. Grayscale replicates. */
export function toRgba(
  image: DecodedImage,
  wl: WindowLevel = DEFAULT_WINDOW,
): RgbaImage {
  const mapped = windowMap(image.samples, wl);
  const n = image.width * image.height;
  const rgba = new Uint8ClampedArray(n * 4);
  for (let i = 0; i < n; i++) {
    if (image.channels === 1) {
      rgba[4 * i] = rgba[4 * i + 1] = rgba[4 * i + 2] = mapped[i];
    } else {
      rgba[4 * i] = mapped[3 * i];
      rgba[4 * i + 1] = mapped[3 * i + 1];
      rgba[4 * i + 2] = mapped[3 * i + 2];
    }
    rgba[4 * i + 3] = 255;
  }
  return { width: image.width, height: image.height, rgba };
}

export interface SwitchEvent {
  ts: number;
  caseId: string;
  from: DisplayMode;
  to: DisplayMode;
}

const ZOOM_MIN = 0.25;
const ZOOM_MAX = 8;

export class Viewer {
  private condition: Condition | null = null;
  private caseId: string | null = null;
  private mode: DisplayMode = 'grayscale';
  private rendered = false;
  zoom = 1;
  panX = 0;
  panY = 0;
  window: WindowLevel = { ...DEFAULT_WINDOW };
  /** Client-side audit trail of side-by-side mode switches. */
  readonly switchLog: SwitchEvent[] = [];

  constructor(private readonly clock: () => number = () => Date.now()) {}

  loadCase(payload: CasePayload): void {
    this.condition = payload.condition;
    this.caseId = payload.case_id;
    this.mode =
      payload.condition === 'tdce-only'
        ? 'tdce'
        : payload.condition === 'side-by-side'
          ? 'split'
          : 'grayscale';
    this.rendered = false;
    this.zoom = 1;
    this.panX = 0;
    this.panY = 0;
  }

  get activeCondition(): Condition | null {
    return this.condition;
  }

  get activeCaseId(): string | null {
    return this.caseId;
  }

  get displayMode(): DisplayMode {
    return this.mode;
  }

  /** Rating controls stay disabled until this flips. */
  get canRate(): boolean {
    return this.rendered;
  }

  markRendered(): void {
    this.rendered = true;
  }

  get modeToggleEnabled(): boolean {
    return this.condition === 'side-by-side';
  }

  setMode(mode: DisplayMode): void {
    if (!this.modeToggleEnabled) {
      throw new Error('display mode is fixed outside side-by-side sessions');
    }
    if (mode === this.mode) return;
    this.switchLog.push({
      ts: this.clock(),
      caseId: this.caseId ?? '',
      from: this.mode,
      to: mode,
    });
    this.mode = mode;
  }

  /** Panels each render under the shared zoom/pan, so they stay in sync. */
  panBy(dx: number, dy: number): void {
    this.panX += dx;
    this.panY += dy;
  }

  zoomBy(factor: number): void {
    this.zoom = Math.min(ZOOM_MAX, Math.max(ZOOM_MIN, this.zoom * factor));
  }

  resetView(): void {
    this.zoom = 1;
    this.panX = 0;
    this.panY = 0;
  }
}
