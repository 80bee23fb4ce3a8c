export {
  ApiError,
  assertBlind,
  BINARY_CALLS,
  type BinaryCall,
  BlindingViolation,
  type CaseImages,
  type CasePayload,
  type CompletionPayload,
  type Condition,
  type FetchLike,
  FORBIDDEN_RESPONSE_KEYS,
  ForbiddenError,
  isCompletion,
  NetworkError,
  NotFoundError,
  OrderConflictError,
  type RatingBody,
  StudyApi,
  type StudyApiOptions,
  ValidationError,
  WashoutLockedError,
} from './api.js';
export {
  base64ToBytes,
  type DecodedImage,
  decodePng16,
  PngFormatError,
} from './png.js';
export {
  DEFAULT_WINDOW,
  type DisplayMode,
  type RgbaImage,
  type SwitchEvent,
  toRgba,
  Viewer,
  type WindowLevel,
  windowMap,
} from './viewer.js';
export { ActiveTimer } from './timing.js';
export {
  type DraftCheck,
  type RatingDraft,
  type Screen,
  SessionController,
  type SubmitOutcome,
} from './session.js';
export { bindKeys, handleKey, type KeyActions } from './keys.js';
export {
  canvasPainter,
  mountStudyUi,
  type MountOptions,
  type Painter,
  type StudyUiHandle,
  type ViewTransform,
} from './dom.js';
