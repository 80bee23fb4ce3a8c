/**
 * DOM composition root. All behavior lives in SessionController and
 * Viewer; this layer only projects their state into elements and feeds
 * interactions back. Canvas work goes through an injectable painter so
 * the wiring is testable without a real 2D context.
 */

import type { CasePayload } from './api.js';
import { bindKeys } from './keys.js';
import { base64ToBytes, decodePng16 } from './png.js';
import type { SessionController } from './session.js';
import { type RgbaImage, toRgba } from './viewer.js';

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface Painter {
  paint(canvas: HTMLCanvasElement, image: RgbaImage, view: ViewTransform): void;
}

/** Real renderer: nearest-neighbour scaling so pixels stay inspectable. */
export function canvasPainter(): Painter {
  return {
    paint(canvas, image, view) {
      const off = canvas.ownerDocument.createElement('canvas');
      off.width = image.width;
      off.height = image.height;
      const offCtx = off.getContext('2d');
      const ctx = canvas.getContext('2d');
      if (!offCtx || !ctx) throw new Error('2D canvas context unavailable');
      // Copy into a freshly backed array: ImageData requires a plain
      // ArrayBuffer and the source may be a view over anything.
      offCtx.putImageData(
        new ImageData(new Uint8ClampedArray(image.rgba), image.width, image.height),
        0, 0,
      );
      ctx.save();
      ctx.imageSmoothingEnabled = false;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      ctx.translate(view.panX, view.panY);
      ctx.scale(view.zoom, view.zoom);
      ctx.drawImage(off, 0, 0);
      ctx.restore();
    },
  };
}

export interface MountOptions {
  painter?: Painter;
  /** Confirmation hook for the BI-RADS consistency warning. */
  confirmFn?: (message: string) => boolean;
  keyTarget?: { addEventListener: Function; removeEventListener: Function };
}

export interface StudyUiHandle {
  refresh(): void;
  dispose(): void;
}

export function mountStudyUi(
  root: HTMLElement,
  controller: SessionController,
  options: MountOptions = {},
): StudyUiHandle {
  const doc = root.ownerDocument;
  const painter = options.painter ?? canvasPainter();
  const confirmFn = options.confirmFn ?? ((message: string) => {
    const w = (doc.defaultView ?? globalThis) as { confirm?: (m: string) => boolean };
    return w.confirm ? w.confirm(message) : true;
  });
  let disposed = false;

  const unbindKeys = options.keyTarget || doc.defaultView
    ? bindKeys(
        (options.keyTarget ?? doc.defaultView!) as never,
        controller,
        { onOutcome: () => refresh() },
      )
    : () => {};

  function el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    role: string,
    text?: string,
  ): HTMLElementTagNameMap[K] {
    const node = doc.createElement(tag);
    node.setAttribute('data-role', role);
    if (text !== undefined) node.textContent = text;
    return node;
  }

  function button(role: string, label: string, onClick: () => void): HTMLButtonElement {
    const node = el('button', role, label);
    node.addEventListener('click', onClick);
    return node;
  }

  function renderCaseScreen(payload: CasePayload): void {
    const header = el('div', 'progress',
      `Case ${payload.case_index + 1} of ${payload.n_cases}`);
    root.appendChild(header);

    const panels = el('div', 'panels');
    const mode = controller.viewer.displayMode;
    const wanted: Array<'grayscale' | 'tdce'> =
      mode === 'split' ? ['grayscale', 'tdce'] : mode === 'tdce' ? ['tdce'] : ['grayscale'];
    for (const key of wanted) {
      const b64 = payload.images[key];
      if (!b64) continue;
      const canvas = el('canvas', `panel-${key}`);
      canvas.width = 512;
      canvas.height = 512;
      panels.appendChild(canvas);
      void paintPanel(canvas, b64, payload);
    }
    root.appendChild(panels);

    if (controller.viewer.modeToggleEnabled) {
      root.appendChild(button('mode-toggle', `view: ${mode}`, () => {
        const order = ['split', 'grayscale', 'tdce'] as const;
        const next = order[(order.indexOf(mode as never) + 1) % order.length];
        controller.viewer.setMode(next);
        refresh();
      }));
    }

    const form = el('fieldset', 'rating-form') as HTMLFieldSetElement;
    form.disabled = !controller.viewer.canRate;
    for (const call of ['non-suspicious', 'suspicious'] as const) {
      const b = button(`call-${call}`, call, () => {
        controller.setBinaryCall(call);
        refresh();
      });
      b.setAttribute('aria-pressed', String(controller.draft.binaryCall === call));
      form.appendChild(b);
    }
    const select = el('select', 'birads') as HTMLSelectElement;
    const blank = doc.createElement('option');
    blank.value = '';
    blank.textContent = 'BI-RADS';
    select.appendChild(blank);
    for (let i = 0; i <= 6; i++) {
      const option = doc.createElement('option');
      option.value = String(i);
      option.textContent = String(i);
      select.appendChild(option);
    }
    select.value = controller.draft.birads === undefined
      ? '' : String(controller.draft.birads);
    select.addEventListener('change', () => {
      if (select.value !== '') controller.setBirads(Number(select.value));
      refresh();
    });
    form.appendChild(select);

    const check = controller.checkDraft();
    const submit = button('submit', 'Submit rating', () => { void trySubmit(); });
    submit.disabled = !controller.viewer.canRate || !check.ok;
    form.appendChild(submit);
    root.appendChild(form);

    root.appendChild(button('pause', 'Pause', () => {
      void controller.pause().then(refresh);
    }));

    if (controller.lastError) {
      root.appendChild(el('div', 'banner', controller.lastError));
      root.appendChild(button('retry', 'Retry', () => { void trySubmit(); }));
    }
  }

  async function trySubmit(): Promise<void> {
    let outcome = await controller.submit();
    if (outcome === 'needs-confirmation') {
      const check = controller.checkDraft();
      const message = check.ok && check.warning ? check.warning : 'confirm rating';
      if (confirmFn(message)) {
        outcome = await controller.submit({ acceptWarning: true });
      }
    }
    refresh();
  }

  async function paintPanel(
    canvas: HTMLCanvasElement,
    b64: string,
    payload: CasePayload,
  ): Promise<void> {
    const decoded = await decodePng16(base64ToBytes(b64));
    if (disposed) return;
    // A slow decode may land after the screen moved on; never unlock
    // rating off a stale image.
    const screen = controller.screen;
    if (screen.kind !== 'case' || screen.payload.case_id !== payload.case_id) return;
    const viewer = controller.viewer;
    painter.paint(canvas, toRgba(decoded, viewer.window), {
      zoom: viewer.zoom,
      panX: viewer.panX,
      panY: viewer.panY,
    });
    if (!viewer.canRate) {
      viewer.markRendered();
      refresh();
    }
  }

  function refresh(): void {
    if (disposed) return;
    root.textContent = '';
    const screen = controller.screen;
    switch (screen.kind) {
      case 'idle':
        root.appendChild(button('open', 'Open session', () => {
          void controller.begin().then(refresh);
        }));
        break;
      case 'case':
        renderCaseScreen(screen.payload);
        break;
      case 'paused':
        root.appendChild(el('div', 'paused-note', 'Session paused; timing stopped.'));
        root.appendChild(button('resume', 'Resume', () => {
          void controller.resume().then(refresh);
        }));
        break;
      case 'complete':
        root.appendChild(el('div', 'complete-note',
          screen.washoutUntil
            ? `Session ${screen.session} complete. Next session unlocks ${screen.washoutUntil}.`
            : `Session ${screen.session} complete.`));
        break;
      case 'locked':
        root.appendChild(el('div', 'locked-note',
          `Locked until ${screen.unlockAt || 'washout ends'}.`));
        break;
      case 'error':
        root.appendChild(el('div', 'banner', screen.message));
        root.appendChild(button('retry', 'Retry', () => {
          void controller.begin().then(refresh);
        }));
        break;
    }
  }

  refresh();
  return {
    refresh,
    dispose() {
      disposed = true;
      unbindKeys();
      root.textContent = '';
    },
  };
}
