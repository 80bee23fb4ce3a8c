/**
 * Keyboard shortcuts, so ratings do not pay a mousing tax:
 *   s / n      suspicious / non-suspicious
 *   0-6        BI-RADS category
 *   Enter      submit (accepts a pending consistency warning on repeat)
 *   p          pause or resume
 *   t          cycle display mode (side-by-side sessions only)
 *   arrows     pan, +/- zoom, r reset view
 */

import type { SessionController, SubmitOutcome } from './session.js';

export interface KeyActions {
  onOutcome?: (outcome: SubmitOutcome) => void;
}

const PAN_STEP = 32;

export function handleKey(
  key: string,
  controller: SessionController,
  actions: KeyActions = {},
  pendingConfirm: { armed: boolean } = { armed: false },
): boolean {
  const viewer = controller.viewer;
  switch (key) {
    case 's':
      controller.setBinaryCall('suspicious');
      return true;
    case 'n':
      controller.setBinaryCall('non-suspicious');
      return true;
    case '0': case '1': case '2': case '3':
    case '4': case '5': case '6':
      controller.setBirads(Number(key));
      return true;
    case 'Enter':
      void controller.submit({ acceptWarning: pendingConfirm.armed }).then((outcome) => {
        pendingConfirm.armed = outcome === 'needs-confirmation';
        actions.onOutcome?.(outcome);
      });
      return true;
    case 'p':
      if (controller.screen.kind === 'paused') void controller.resume();
      else void controller.pause();
      return true;
    case 't':
      if (viewer.modeToggleEnabled) {
        const order = ['split', 'grayscale', 'tdce'] as const;
        const next = order[(order.indexOf(viewer.displayMode as never) + 1) % order.length];
        viewer.setMode(next);
      }
      return true;
    case 'ArrowLeft':
      viewer.panBy(-PAN_STEP, 0);
      return true;
    case 'ArrowRight':
      viewer.panBy(PAN_STEP, 0);
      return true;
    case 'ArrowUp':
      viewer.panBy(0, -PAN_STEP);
      return true;
    case 'ArrowDown':
      viewer.panBy(0, PAN_STEP);
      return true;
    case '+':
    case '=':
      viewer.zoomBy(1.25);
      return true;
    case '-':
      viewer.zoomBy(0.8);
      return true;
    case 'r':
      viewer.resetView();
      return true;
    default:
      return false;
  }
}

/** Wire the handler to a DOM target; returns the unbind function. */
export function bindKeys(
  target: { addEventListener: Function; removeEventListener: Function },
  controller: SessionController,
  actions: KeyActions = {},
): () => void {
  const pendingConfirm = { armed: false };
  const listener = (event: { key: string; preventDefault?: () => void }) => {
    if (handleKey(event.key, controller, actions, pendingConfirm)) {
      event.preventDefault?.();
    }
  };
  target.addEventListener('keydown', listener);
  return () => target.removeEventListener('keydown', listener);
}
