/**
 * One reader's session against the study service. The server cursor is
 * authoritative: on an order conflict the controller re-opens the
 * session and lands wherever the server says, and navigation is
 * forward-only by construction (there is no operation that goes back).
 */

import {
  type CasePayload,
  isCompletion,
  NetworkError,
  OrderConflictError,
  type RatingBody,
  StudyApi,
  WashoutLockedError,
} from './api.js';
import { ActiveTimer } from './timing.js';
import { Viewer } from './viewer.js';

export type Screen =
  | { kind: 'idle' }
  | { kind: 'case'; payload: CasePayload }
  | { kind: 'paused' }
  | { kind: 'complete'; session: number; washoutUntil: string | null }
  | { kind: 'locked'; unlockAt: string; detail: string }
  | { kind: 'error'; message: string };

export interface RatingDraft {
  binaryCall?: RatingBody['binary_call'];
  birads?: number;
}

export type DraftCheck =
  | { ok: true; warning?: string }
  | { ok: false; blocked: string };

export type SubmitOutcome =
  | 'submitted'
  | 'completed'
  | 'resynced'
  | 'needs-confirmation'
  | 'blocked-not-rendered'
  | 'blocked-incomplete'
  | 'network-error';

export class SessionController {
  screen: Screen = { kind: 'idle' };
  draft: RatingDraft = {};
  /** Set when the last call failed without changing the screen. */
  lastError: string | null = null;
  readonly viewer: Viewer;

  private readonly timers = new Map<string, ActiveTimer>();
  private inFlight = false;

  constructor(
    private readonly api: StudyApi,
    readonly studyId: string,
    readonly readerId: string,
    readonly session: number,
    private readonly clock: () => number = () => Date.now(),
  ) {
    this.viewer = new Viewer(clock);
  }

  /** Open the session; resumes automatically if it was left paused. */
  async begin(): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    try {
      const payload = await this.api.openSession(
        this.studyId, this.readerId, this.session,
      );
      this.showCase(payload);
    } catch (err) {
      if (err instanceof OrderConflictError) {
        try {
          const payload = await this.api.resume(
            this.studyId, this.readerId, this.session,
          );
          this.showCase(payload);
          return;
        } catch {
          this.screen = { kind: 'error', message: err.detail };
          return;
        }
      }
      if (err instanceof WashoutLockedError) {
        this.screen = { kind: 'locked', unlockAt: err.unlockAt, detail: err.detail };
        return;
      }
      if (err instanceof NetworkError) {
        this.screen = { kind: 'error', message: 'network failure; retry' };
        return;
      }
      throw err;
    } finally {
      this.inFlight = false;
    }
  }

  setBinaryCall(call: RatingBody['binary_call']): void {
    this.draft.binaryCall = call;
  }

  setBirads(birads: number): void {
    if (!Number.isInteger(birads) || birads < 0 || birads > 6) {
      throw new RangeError(`BI-RADS must be an integer 0-6, got ${birads}`);
    }
    this.draft.birads = birads;
  }

  /**
   * Both fields are required before submission. A suspicious call with
   * BI-RADS 3 or below is flagged but permitted: readers may disagree
   * with the scale's usual reading.
   */
  checkDraft(): DraftCheck {
    if (this.draft.binaryCall === undefined) {
      return { ok: false, blocked: 'binary call not chosen' };
    }
    if (this.draft.birads === undefined) {
      return { ok: false, blocked: 'BI-RADS category not chosen' };
    }
    if (this.draft.binaryCall === 'suspicious' && this.draft.birads <= 3) {
      return { ok: true, warning: 'suspicious call with BI-RADS <= 3' };
    }
    return { ok: true };
  }

  async submit(options: { acceptWarning?: boolean } = {}): Promise<SubmitOutcome> {
    if (this.screen.kind !== 'case' || this.inFlight) return 'blocked-incomplete';
    if (!this.viewer.canRate) return 'blocked-not-rendered';
    const check = this.checkDraft();
    if (!check.ok) return 'blocked-incomplete';
    if (check.warning && !options.acceptWarning) return 'needs-confirmation';

    const payload = this.screen.payload;
    this.inFlight = true;
    try {
      const next = await this.api.submitRating(
        this.studyId, this.readerId, this.session, payload.case_id,
        { binary_call: this.draft.binaryCall!, birads: this.draft.birads! },
      );
      this.stopTimer(payload.case_id);
      this.draft = {};
      this.lastError = null;
      if (isCompletion(next)) {
        this.screen = {
          kind: 'complete',
          session: next.session,
          washoutUntil: next.washout_until,
        };
        return 'completed';
      }
      this.showCase(next);
      return 'submitted';
    } catch (err) {
      if (err instanceof OrderConflictError) {
        await this.resync();
        return 'resynced';
      }
      if (err instanceof NetworkError) {
        this.lastError = 'network failure; rating not recorded, retry';
        return 'network-error';
      }
      throw err;
    } finally {
      this.inFlight = false;
    }
  }

  async pause(): Promise<void> {
    if (this.screen.kind !== 'case' || this.inFlight) return;
    const caseId = this.screen.payload.case_id;
    this.inFlight = true;
    try {
      await this.api.pause(this.studyId, this.readerId, this.session);
      this.stopTimer(caseId);
      this.lastError = null;
      this.screen = { kind: 'paused' };
    } catch (err) {
      if (err instanceof NetworkError) {
        this.lastError = 'network failure; still reading';
        return;
      }
      throw err;
    } finally {
      this.inFlight = false;
    }
  }

  async resume(): Promise<void> {
    if (this.screen.kind !== 'paused' || this.inFlight) return;
    this.inFlight = true;
    try {
      const payload = await this.api.resume(
        this.studyId, this.readerId, this.session,
      );
      this.lastError = null;
      this.showCase(payload);
    } catch (err) {
      if (err instanceof NetworkError) {
        this.lastError = 'network failure; still paused';
        return;
      }
      throw err;
    } finally {
      this.inFlight = false;
    }
  }

  /** Client-side view of active reading time for one case, in seconds. */
  activeSeconds(caseId: string): number {
    const timer = this.timers.get(caseId);
    return timer ? timer.elapsed(this.clock()) / 1000 : 0;
  }

  private async resync(): Promise<void> {
    this.draft = {};
    try {
      const payload = await this.api.openSession(
        this.studyId, this.readerId, this.session,
      );
      this.showCase(payload);
      this.lastError = 'order conflict; resynced to the server cursor';
    } catch (err) {
      if (err instanceof OrderConflictError) {
        // The conflict was the last case being rated elsewhere.
        this.screen = { kind: 'error', message: err.detail };
        return;
      }
      throw err;
    }
  }

  private showCase(payload: CasePayload): void {
    this.screen = { kind: 'case', payload };
    this.viewer.loadCase(payload);
    let timer = this.timers.get(payload.case_id);
    if (!timer) {
      timer = new ActiveTimer();
      this.timers.set(payload.case_id, timer);
    }
    timer.start(this.clock());
  }

  private stopTimer(caseId: string): void {
    this.timers.get(caseId)?.stop(this.clock());
  }
}
