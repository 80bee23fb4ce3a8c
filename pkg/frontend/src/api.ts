/**
 * Typed client for the observer-study HTTP API.
 *
 * Every reader-facing payload is checked against the blinding contract
 * before it is handed to the caller: a response carrying a reference
 * label, ground truth, or prevalence field is treated as a protocol
 * violation, not data.
 */

export type Condition = 'grayscale-only' | 'tdce-only' | 'side-by-side';

export const BINARY_CALLS = ['non-suspicious', 'suspicious'] as const;
export type BinaryCall = (typeof BINARY_CALLS)[number];

/** Keys that must never appear anywhere in a reader-facing response. */
export const FORBIDDEN_RESPONSE_KEYS = new Set([
  'reference', 'truth', 'ground_truth', 'label', 'labels', 'prevalence',
]);

/** Base64 PNG bytes, keyed by the conditions the session allows. */
export interface CaseImages {
  grayscale?: string;
  tdce?: string;
}

export interface CasePayload {
  study_id: string;
  reader_id: string;
  session: number;
  condition: Condition;
  case_id: string;
  /** Zero-based position within this session's case order. */
  case_index: number;
  n_cases: number;
  images: CaseImages;
}

export interface CompletionPayload {
  session_complete: true;
  session: number;
  /** ISO timestamp, or null after the final session. */
  washout_until: string | null;
}

export interface RatingBody {
  binary_call: BinaryCall;
  birads: number;
}

export function isCompletion(
  p: CasePayload | CompletionPayload,
): p is CompletionPayload {
  return (p as CompletionPayload).session_complete === true;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(detail);
    this.name = new.target.name;
  }
}

export class NotFoundError extends ApiError {}
export class OrderConflictError extends ApiError {}
export class ValidationError extends ApiError {}
export class ForbiddenError extends ApiError {}

export class WashoutLockedError extends ApiError {
  constructor(detail: string, readonly unlockAt: string) {
    super(423, detail);
  }
}

/** A fetch that rejected: the request may never have reached the server. */
export class NetworkError extends Error {
  constructor(override readonly cause: unknown) {
    super('network failure');
    this.name = 'NetworkError';
  }
}

/** Reader-facing payloads are rejected outright if a blinded key slips in. */
export class BlindingViolation extends Error {
  constructor(readonly key: string) {
    super(`blinded key in response: ${key}`);
    this.name = 'BlindingViolation';
  }
}

export function assertBlind<T>(payload: T): T {
  if (Array.isArray(payload)) {
    for (const item of payload) assertBlind(item);
  } else if (payload !== null && typeof payload === 'object') {
    for (const [key, value] of Object.entries(payload)) {
      if (FORBIDDEN_RESPONSE_KEYS.has(key)) throw new BlindingViolation(key);
      assertBlind(value);
    }
  }
  return payload;
}

export type FetchLike = (
  url: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
  },
) => Promise<{
  status: number;
  json(): Promise<unknown>;
  text(): Promise<string>;
}>;

export interface StudyApiOptions {
  /** Bearer token for this reader, if the deployment requires one. */
  readerToken?: string;
  /** Injection point for tests and for environments without global fetch. */
  fetchFn?: FetchLike;
}

interface ErrorBody {
  detail?: string;
  unlock_at?: string;
}

export class StudyApi {
  private readonly fetchFn: FetchLike;
  private readonly token?: string;

  constructor(
    readonly baseUrl: string,
    options: StudyApiOptions = {},
  ) {
    this.fetchFn = options.fetchFn ?? (fetch as unknown as FetchLike);
    this.token = options.readerToken;
  }

  async openSession(
    studyId: string,
    readerId: string,
    k: number,
  ): Promise<CasePayload> {
    const payload = await this.post(this.sessionUrl(studyId, readerId, k, 'open'));
    return assertBlind(payload as CasePayload);
  }

  async submitRating(
    studyId: string,
    readerId: string,
    k: number,
    caseId: string,
    rating: RatingBody,
  ): Promise<CasePayload | CompletionPayload> {
    const url =
      this.sessionUrl(studyId, readerId, k, `cases/${encodeURIComponent(caseId)}/rating`);
    const payload = await this.post(url, rating);
    return assertBlind(payload as CasePayload | CompletionPayload);
  }

  async pause(
    studyId: string,
    readerId: string,
    k: number,
  ): Promise<{ paused_at: string }> {
    const payload = await this.post(this.sessionUrl(studyId, readerId, k, 'pause'));
    return assertBlind(payload as { paused_at: string });
  }

  async resume(
    studyId: string,
    readerId: string,
    k: number,
  ): Promise<CasePayload> {
    const payload = await this.post(this.sessionUrl(studyId, readerId, k, 'resume'));
    return assertBlind(payload as CasePayload);
  }

  /** Operator call: register a study with its plan and case images. */
  async createStudy(
    plan: unknown,
    assets: Record<string, { grayscale: string; tdce: string }>,
    studyId?: string,
  ): Promise<string> {
    const payload = await this.post(`${this.baseUrl}/studies`, {
      plan,
      assets,
      study_id: studyId ?? null,
    });
    return (payload as { study_id: string }).study_id;
  }

  async exportCsv(studyId: string): Promise<string> {
    let response;
    try {
      response = await this.fetchFn(
        `${this.baseUrl}/studies/${encodeURIComponent(studyId)}/export`,
        { method: 'GET', headers: this.headers(false) },
      );
    } catch (err) {
      throw new NetworkError(err);
    }
    const text = await response.text();
    if (response.status >= 400) throw toApiError(response.status, { detail: text });
    return text;
  }

  private sessionUrl(
    studyId: string,
    readerId: string,
    k: number,
    tail: string,
  ): string {
    return (
      `${this.baseUrl}/studies/${encodeURIComponent(studyId)}` +
      `/readers/${encodeURIComponent(readerId)}/sessions/${k}/${tail}`
    );
  }

  private headers(json: boolean): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers['content-type'] = 'application/json';
    if (this.token) headers['authorization'] = `Bearer ${this.token}`;
    return headers;
  }

  private async post(url: string, body?: unknown): Promise<unknown> {
    let response;
    try {
      response = await this.fetchFn(url, {
        method: 'POST',
        headers: this.headers(body !== undefined),
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new NetworkError(err);
    }
    const payload = (await response.json()) as ErrorBody;
    if (response.status >= 400) throw toApiError(response.status, payload);
    return payload;
  }
}

function toApiError(status: number, body: ErrorBody): ApiError {
  const detail = body.detail ?? `HTTP ${status}`;
  switch (status) {
    case 404:
      return new NotFoundError(status, detail);
    case 409:
      return new OrderConflictError(status, detail);
    case 423:
      return new WashoutLockedError(detail, body.unlock_at ?? '');
    case 403:
      return new ForbiddenError(status, detail);
    case 400:
    case 422:
      return new ValidationError(status, detail);
    default:
      return new ApiError(status, detail);
  }
}
