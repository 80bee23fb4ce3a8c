import { describe, expect, it } from 'vitest';

import { StudyApi } from '../src/api.js';
import { SessionController } from '../src/session.js';
import { FakeService, ManualClock, threeReaderPlan } from './fakeBackend.js';
import { pngBase64 } from './fixtures.js';

const ASSETS = Object.fromEntries(
  ['c0', 'c1', 'c2'].map((caseId, i) => [caseId, {
    grayscale: pngBase64({
      width: 2, height: 2, channels: 1, samples: [i, i, i, i],
    }),
    tdce: pngBase64({
      width: 2, height: 2, channels: 3, samples: new Array(12).fill(i),
    }),
  }]),
);

function setup(readerId = 'rd0', k = 1) {
  const clock = new ManualClock();
  const service = new FakeService(threeReaderPlan(), ASSETS, clock);
  const api = new StudyApi('http://svc', { fetchFn: service.fetch });
  const controller = new SessionController(
    api, 'st', readerId, k, () => clock.now * 1000,
  );
  return { clock, service, controller };
}

/** Rate the current case, marking the viewer rendered first. */
async function rate(
  controller: SessionController,
  call: 'suspicious' | 'non-suspicious' = 'non-suspicious',
  birads = call === 'suspicious' ? 4 : 1,
) {
  controller.viewer.markRendered();
  controller.setBinaryCall(call);
  controller.setBirads(birads);
  return controller.submit();
}

describe('session opening', () => {
  it('lands on the first case of this reader and session', async () => {
    const { controller } = setup('rd1');
    await controller.begin();
    expect(controller.screen.kind).toBe('case');
    if (controller.screen.kind !== 'case') return;
    // rd1's first session order is the plan's rotate-by-1: c1, c2, c0.
    expect(controller.screen.payload.case_id).toBe('c1');
    expect(controller.screen.payload.condition).toBe('tdce-only');
    expect(controller.screen.payload.case_index).toBe(0);
    expect(controller.viewer.displayMode).toBe('tdce');
  });

  it('shows the washout lock with its unlock date', async () => {
    const { clock, service, controller } = setup('rd0', 2);
    // Complete session 1 out of band, then try session 2 immediately.
    for (let i = 0; i < 3; i++) service.rateOutOfBand('rd0', 1, 'suspicious', 4);
    const opened = clock.now;
    await controller.begin();
    expect(controller.screen.kind).toBe('locked');
    if (controller.screen.kind !== 'locked') return;
    expect(controller.screen.unlockAt)
      .toBe(new Date((opened + 28 * 86400) * 1000).toISOString());
  });

  it('opens session 2 once the washout has elapsed', async () => {
    const { clock, service, controller } = setup('rd0', 2);
    for (let i = 0; i < 3; i++) service.rateOutOfBand('rd0', 1, 'suspicious', 4);
    clock.advance(28 * 86400 + 1);
    await controller.begin();
    expect(controller.screen.kind).toBe('case');
  });

  it('auto-resumes a session left paused', async () => {
    const first = setup();
    await first.controller.begin();
    await first.controller.pause();
    expect(first.controller.screen.kind).toBe('paused');

    // A fresh controller (new tab) hits the 409 and resumes through it.
    const api = new StudyApi('http://svc', { fetchFn: first.service.fetch });
    const second = new SessionController(
      api, 'st', 'rd0', 1, () => first.clock.now * 1000,
    );
    await second.begin();
    expect(second.screen.kind).toBe('case');
  });

  it('turns a network failure into a retryable error screen', async () => {
    const { service, controller } = setup();
    service.failNext();
    await controller.begin();
    expect(controller.screen.kind).toBe('error');
    await controller.begin();
    expect(controller.screen.kind).toBe('case');
  });
});

describe('draft validation', () => {
  it('blocks until both fields are chosen', async () => {
    const { controller } = setup();
    await controller.begin();
    expect(controller.checkDraft()).toEqual({ ok: false, blocked: 'binary call not chosen' });
    controller.setBinaryCall('suspicious');
    expect(controller.checkDraft()).toEqual({ ok: false, blocked: 'BI-RADS category not chosen' });
    controller.setBirads(4);
    expect(controller.checkDraft()).toEqual({ ok: true });
  });

  it('rejects out-of-range BI-RADS values outright', async () => {
    const { controller } = setup();
    expect(() => controller.setBirads(7)).toThrow(RangeError);
    expect(() => controller.setBirads(-1)).toThrow(RangeError);
    expect(() => controller.setBirads(2.5)).toThrow(RangeError);
  });

  it('flags but permits a suspicious call with BI-RADS <= 3', async () => {
    const { controller } = setup();
    await controller.begin();
    controller.setBinaryCall('suspicious');
    controller.setBirads(2);
    expect(controller.checkDraft()).toEqual({
      ok: true, warning: 'suspicious call with BI-RADS <= 3',
    });
    controller.setBirads(4);
    expect(controller.checkDraft()).toEqual({ ok: true });
    controller.setBinaryCall('non-suspicious');
    controller.setBirads(1);
    expect(controller.checkDraft()).toEqual({ ok: true });
  });
});

describe('submitting ratings', () => {
  it('refuses to submit before the image has rendered', async () => {
    const { service, controller } = setup();
    await controller.begin();
    controller.setBinaryCall('non-suspicious');
    controller.setBirads(1);
    const before = service.requests.length;
    expect(await controller.submit()).toBe('blocked-not-rendered');
    expect(service.requests.length).toBe(before);

    controller.viewer.markRendered();
    expect(await controller.submit()).toBe('submitted');
  });

  it('refuses an incomplete draft without a request', async () => {
    const { service, controller } = setup();
    await controller.begin();
    controller.viewer.markRendered();
    const before = service.requests.length;
    expect(await controller.submit()).toBe('blocked-incomplete');
    expect(service.requests.length).toBe(before);
  });

  it('holds a flagged rating until the warning is accepted', async () => {
    const { service, controller } = setup();
    await controller.begin();
    controller.viewer.markRendered();
    controller.setBinaryCall('suspicious');
    controller.setBirads(1);
    const before = service.requests.length;
    expect(await controller.submit()).toBe('needs-confirmation');
    expect(service.requests.length).toBe(before);
    expect(await controller.submit({ acceptWarning: true })).toBe('submitted');
    expect(service.ratings[0]).toMatchObject({
      case_id: 'c0', binary_call: 'suspicious', birads: 1,
    });
  });

  it('advances through the session and ends on the completion screen', async () => {
    const { controller } = setup();
    await controller.begin();
    const seen: string[] = [];
    for (;;) {
      if (controller.screen.kind === 'case') seen.push(controller.screen.payload.case_id);
      const outcome = await rate(controller);
      if (outcome === 'completed') break;
      expect(outcome).toBe('submitted');
    }
    expect(seen).toEqual(['c0', 'c1', 'c2']);
    expect(controller.screen.kind).toBe('complete');
    if (controller.screen.kind !== 'complete') return;
    expect(controller.screen.washoutUntil).not.toBeNull();
    expect(controller.draft).toEqual({});
  });

  it('resets the render gate on every advance', async () => {
    const { controller } = setup();
    await controller.begin();
    await rate(controller);
    expect(controller.viewer.canRate).toBe(false);
  });

  it('keeps the case and the draft on a network failure, then retries', async () => {
    const { service, controller } = setup();
    await controller.begin();
    controller.viewer.markRendered();
    controller.setBinaryCall('suspicious');
    controller.setBirads(5);
    service.failNext();
    expect(await controller.submit()).toBe('network-error');
    expect(controller.screen.kind).toBe('case');
    if (controller.screen.kind !== 'case') return;
    expect(controller.screen.payload.case_id).toBe('c0');
    expect(controller.lastError).toMatch(/retry/);
    expect(service.ratings).toHaveLength(0);

    expect(await controller.submit()).toBe('submitted');
    expect(service.ratings).toHaveLength(1);
    expect(controller.lastError).toBeNull();
  });

  it('resyncs to the server cursor on an order conflict', async () => {
    const { service, controller } = setup();
    await controller.begin();
    // Another tab rates the current case first.
    service.rateOutOfBand('rd0', 1, 'non-suspicious', 2);
    controller.viewer.markRendered();
    controller.setBinaryCall('suspicious');
    controller.setBirads(4);
    expect(await controller.submit()).toBe('resynced');
    expect(controller.screen.kind).toBe('case');
    if (controller.screen.kind !== 'case') return;
    expect(controller.screen.payload.case_id).toBe('c1');
    expect(controller.draft).toEqual({});
    expect(controller.lastError).toMatch(/resynced/);
  });

  it('exposes no way to walk back to an earlier case', () => {
    const names = Object.getOwnPropertyNames(SessionController.prototype);
    expect(names.length).toBeGreaterThan(5);
    for (const name of names) {
      expect(name).not.toMatch(/back|previous|prior|rewind/i);
    }
  });
});

describe('pause and resume', () => {
  it('moves between paused and reading', async () => {
    const { controller } = setup();
    await controller.begin();
    await controller.pause();
    expect(controller.screen.kind).toBe('paused');
    expect(await controller.submit()).toBe('blocked-incomplete');
    await controller.resume();
    expect(controller.screen.kind).toBe('case');
    if (controller.screen.kind !== 'case') return;
    expect(controller.screen.payload.case_id).toBe('c0');
    // The image re-renders after resume, so rating re-locks.
    expect(controller.viewer.canRate).toBe(false);
  });

  it('keeps the client active-time mirror free of paused time', async () => {
    const { clock, controller } = setup();
    await controller.begin();
    clock.advance(5);
    await controller.pause();
    clock.advance(100);
    await controller.resume();
    clock.advance(2);
    await rate(controller);
    expect(controller.activeSeconds('c0')).toBeCloseTo(7, 6);
  });

  it('stays reading when the pause request never arrives', async () => {
    const { service, controller } = setup();
    await controller.begin();
    service.failNext();
    await controller.pause();
    expect(controller.screen.kind).toBe('case');
    expect(controller.lastError).toMatch(/network/);
  });
});

describe('single-flight guard', () => {
  it('drops a second submit while one is on the wire', async () => {
    const { service, controller } = setup();
    await controller.begin();
    controller.viewer.markRendered();
    controller.setBinaryCall('non-suspicious');
    controller.setBirads(1);

    let release!: () => void;
    service.gate = new Promise((resolve) => { release = resolve; });
    const first = controller.submit();
    const second = controller.submit();
    service.gate = null;
    release();
    expect(await second).toBe('blocked-incomplete');
    expect(await first).toBe('submitted');
    expect(service.ratings).toHaveLength(1);
  });
});
