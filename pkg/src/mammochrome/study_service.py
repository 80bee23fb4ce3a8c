"""Observer-study service: sessions, case delivery, ratings, timing.

State is event-sourced. Every mutation appends one JSON line to
``events.jsonl`` (fsync before acknowledgment), applies it to the
in-memory state, and atomically rewrites ``snapshot.json``. The log is
the source of truth: replaying it must reproduce the snapshot exactly,
so validation happens before append and apply never fails. A torn final
line (crash mid-write) is truncated on load; the lost event was never
acknowledged.

Timing rules: a case's clock starts when the case is served (session
open, previous rating, or resume) and stops at its rating or at a pause.
Paused gaps never count. A process that died with a session open leaves
an open interval; loading the store closes it at the last event's
timestamp and parks the session paused, so the reader resumes with a
fresh interval.

Readers are never sent reference labels, other readers' ratings, or the
class prevalence; the store does not even hold reference labels.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
import threading
import uuid
import warnings
from datetime import datetime, timezone
from pathlib import Path

import pydantic as _pydantic
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .mrmc import BINARY_CALLS, ReaderRating, StudyPlan, write_ratings_csv

EVENTS_FILE = "events.jsonl"
SNAPSHOT_FILE = "snapshot.json"

# keys that must never appear in any payload sent to a reader
FORBIDDEN_RESPONSE_KEYS = frozenset(
    {"reference", "truth", "ground_truth", "label", "labels", "prevalence"})


class StudyError(Exception):
    """Base for store failures; status maps onto the HTTP layer."""
    status = 400


class NotFoundError(StudyError):
    status = 404


class OrderConflictError(StudyError):
    """Out-of-order case, duplicate rating, or wrong session state."""
    status = 409


class WashoutLockedError(StudyError):
    status = 423

    def __init__(self, message: str, unlock_at: str):
        super().__init__(message)
        self.unlock_at = unlock_at


class ValidationError(StudyError):
    status = 422


class ForbiddenError(StudyError):
    status = 403


class EmptyLogError(StudyError):
    status = 409


class TornLogWarning(UserWarning):
    pass


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def blind_payload(payload):
    """Raise if a reader-facing payload carries an excluded key."""
    if isinstance(payload, dict):
        for key, value in payload.items():
            if key in FORBIDDEN_RESPONSE_KEYS:
                raise AssertionError(f"blinded key in response: {key!r}")
            blind_payload(value)
    elif isinstance(payload, (list, tuple)):
        for value in payload:
            blind_payload(value)
    return payload


def _new_session() -> dict:
    return {"state": "locked", "cursor": 0, "opened_at": None,
            "completed_at": None, "intervals": {}}


def _close_open_interval(sess: dict, case_id: str, ts: float) -> None:
    spans = sess["intervals"].get(case_id, [])
    if spans and spans[-1][1] is None:
        if ts > spans[-1][0]:
            spans[-1][1] = ts
        else:
            spans.pop()          # zero-width: contributes nothing, drop


def _apply(state: dict, event: dict) -> None:
    """Pure state transition; events are validated facts and never fail."""
    etype = event["type"]
    ts = event["ts"]
    if etype == "study_created":
        sessions = {}
        for slot in event["plan"]["readers"]:
            sessions[slot["reader_id"]] = {
                str(k): _new_session() for k in (1, 2, 3)}
        state["studies"][event["study_id"]] = {
            "plan": event["plan"], "assets": event["assets"],
            "sessions": sessions, "ratings": []}
        return
    if etype == "recovered":
        closed_at = event["closed_at"]
        for study in state["studies"].values():
            for per_reader in study["sessions"].values():
                for sess in per_reader.values():
                    if sess["state"] == "open":
                        for cid, spans in sess["intervals"].items():
                            _close_open_interval(sess, cid, closed_at)
                        sess["state"] = "paused"
        return

    study = state["studies"][event["study_id"]]
    sess = study["sessions"][event["reader_id"]][str(event["session"])]
    plan = study["plan"]
    slot = next(s for s in plan["readers"]
                if s["reader_id"] == event["reader_id"])
    order = slot["case_orders"][event["session"] - 1]

    if etype == "session_opened":
        sess["state"] = "open"
        if sess["opened_at"] is None:
            sess["opened_at"] = ts
        cid = order[sess["cursor"]]
        sess["intervals"].setdefault(cid, []).append([ts, None])
    elif etype == "rating_submitted":
        cid = order[sess["cursor"]]
        _close_open_interval(sess, cid, ts)
        study["ratings"].append({
            "reader_id": event["reader_id"], "case_id": cid,
            "condition": slot["condition_order"][event["session"] - 1],
            "binary_call": event["binary_call"], "birads": event["birads"],
            "session": event["session"]})
        sess["cursor"] += 1
        if sess["cursor"] == len(order):
            sess["state"] = "complete"
            sess["completed_at"] = ts
        else:
            nxt = order[sess["cursor"]]
            sess["intervals"].setdefault(nxt, []).append([ts, None])
    elif etype == "paused":
        _close_open_interval(sess, order[sess["cursor"]], ts)
        sess["state"] = "paused"
    elif etype == "resumed":
        sess["state"] = "open"
        cid = order[sess["cursor"]]
        sess["intervals"].setdefault(cid, []).append([ts, None])
    else:
        raise ValueError(f"unknown event type: {etype}")


def replay_events(events) -> dict:
    state = {"studies": {}}
    for event in events:
        _apply(state, event)
    return state


def load_events(path) -> list:
    """Events from a log file; a torn final line is truncated in place."""
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_bytes()
    events, offset = [], 0
    for line in raw.splitlines(keepends=True):
        complete = line.endswith(b"\n")
        if complete:
            try:
                events.append(json.loads(line))
            except ValueError:
                complete = False
        if not complete:
            warnings.warn(
                f"torn record at byte {offset} of {path.name}; "
                f"truncating {len(raw) - offset} bytes", TornLogWarning)
            with open(path, "r+b") as fh:
                fh.truncate(offset)
            break
        offset += len(line)
    return events


class StudyStore:
    """File-backed store; all writes serialize through one lock."""

    def __init__(self, root, clock=None, washout_override_days=None):
        import time

        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock if clock is not None else time.time
        self.washout_override_days = washout_override_days
        self._lock = threading.RLock()
        self._events_path = self.root / EVENTS_FILE
        events = load_events(self._events_path)
        self._state = replay_events(events)
        self._seq = events[-1]["seq"] if events else 0
        self._fh = open(self._events_path, "a", encoding="utf-8")
        if any(sess["state"] == "open"
               for study in self._state["studies"].values()
               for per_reader in study["sessions"].values()
               for sess in per_reader.values()):
            last_ts = events[-1]["ts"]
            self._commit("recovered", closed_at=last_ts)
        elif events:
            self._write_snapshot()

    def close(self) -> None:
        self._fh.close()

    # -- plumbing ---------------------------------------------------------

    def _commit(self, etype: str, **payload) -> dict:
        event = {"seq": self._seq + 1, "ts": self.clock(),
                 "type": etype, **payload}
        line = json.dumps(event, sort_keys=True)
        self._fh.write(line + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._seq = event["seq"]
        _apply(self._state, event)
        self._write_snapshot()
        return event

    def _write_snapshot(self) -> None:
        payload = json.dumps({"seq": self._seq, "state": self._state},
                             sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".snapshot-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.root / SNAPSHOT_FILE)
        except BaseException:
            os.unlink(tmp)
            raise

    def state_dict(self) -> dict:
        with self._lock:
            return json.loads(json.dumps(self._state))

    def _study(self, study_id: str) -> dict:
        try:
            return self._state["studies"][study_id]
        except KeyError:
            raise NotFoundError(f"unknown study: {study_id}") from None

    def _session(self, study: dict, reader_id: str, k: int):
        sessions = study["sessions"].get(reader_id)
        if sessions is None:
            raise NotFoundError(f"unknown reader: {reader_id}")
        if str(k) not in sessions:
            raise NotFoundError(f"unknown session index: {k}")
        slot = next(s for s in study["plan"]["readers"]
                    if s["reader_id"] == reader_id)
        return sessions[str(k)], slot

    def _washout_days(self, study: dict) -> int:
        if self.washout_override_days is not None:
            return self.washout_override_days
        return study["plan"]["washout_days"]

    def _case_payload(self, study_id: str, reader_id: str, k: int,
                      sess: dict, slot: dict) -> dict:
        study = self._study(study_id)
        order = slot["case_orders"][k - 1]
        condition = slot["condition_order"][k - 1]
        case_id = order[sess["cursor"]]
        assets = study["assets"][case_id]
        if condition == "grayscale-only":
            images = {"grayscale": assets["grayscale"]}
        elif condition == "tdce-only":
            images = {"tdce": assets["tdce"]}
        else:
            images = {"grayscale": assets["grayscale"],
                      "tdce": assets["tdce"]}
        return blind_payload({
            "study_id": study_id, "reader_id": reader_id, "session": k,
            "condition": condition, "case_id": case_id,
            "case_index": sess["cursor"], "n_cases": len(order),
            "images": images})

    def _completion_payload(self, study: dict, k: int, sess: dict) -> dict:
        washout_until = None
        if k < 3:
            unlock = sess["completed_at"] + self._washout_days(study) * 86400
            washout_until = _iso(unlock)
        return blind_payload({"session_complete": True, "session": k,
                              "washout_until": washout_until})

    # -- commands ---------------------------------------------------------

    def create_study(self, plan, assets, study_id=None) -> str:
        if isinstance(plan, StudyPlan):
            plan_dict = plan.to_dict()
        else:
            try:
                plan_dict = StudyPlan.from_dict(plan).to_dict()
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"bad study plan: {exc}") from None
        cases = plan_dict["cases"]
        if not cases:
            raise ValidationError("study plan has no cases")
        missing = [c for c in cases if c not in (assets or {})]
        if missing:
            raise ValidationError(f"missing assets for cases: {missing}")
        extra = [c for c in assets if c not in cases]
        if extra:
            raise ValidationError(f"assets for unknown cases: {extra}")
        for cid, payload in assets.items():
            if set(payload) != {"grayscale", "tdce"}:
                raise ValidationError(
                    f"case {cid!r} needs exactly grayscale and tdce images")
            for key, b64 in payload.items():
                try:
                    base64.b64decode(b64, validate=True)
                except Exception:
                    raise ValidationError(
                        f"case {cid!r} {key} image is not base64") from None
        with self._lock:
            sid = study_id or f"study-{uuid.uuid4().hex[:8]}"
            if sid in self._state["studies"]:
                raise OrderConflictError(f"study already exists: {sid}")
            self._commit("study_created", study_id=sid, plan=plan_dict,
                         assets=dict(assets))
            return sid

    def study_view(self, study_id: str) -> dict:
        with self._lock:
            study = self._study(study_id)
            sessions = {
                rid: {k: {key: sess[key] for key in
                          ("state", "cursor", "opened_at", "completed_at")}
                      for k, sess in per_reader.items()}
                for rid, per_reader in study["sessions"].items()}
            return {"study_id": study_id, "plan": study["plan"],
                    "sessions": sessions,
                    "n_ratings": len(study["ratings"])}

    def open_session(self, study_id: str, reader_id: str, k: int) -> dict:
        with self._lock:
            study = self._study(study_id)
            sess, slot = self._session(study, reader_id, k)
            if sess["state"] == "open":
                return self._case_payload(study_id, reader_id, k, sess, slot)
            if sess["state"] == "paused":
                raise OrderConflictError("session is paused; resume it")
            if sess["state"] == "complete":
                raise OrderConflictError(f"session {k} already complete")
            if k > 1:
                prev = study["sessions"][reader_id][str(k - 1)]
                if prev["state"] != "complete":
                    raise OrderConflictError(
                        f"session {k - 1} not complete yet")
                unlock = (prev["completed_at"]
                          + self._washout_days(study) * 86400)
                if self.clock() < unlock:
                    raise WashoutLockedError(
                        f"washout until {_iso(unlock)}", unlock_at=_iso(unlock))
            self._commit("session_opened", study_id=study_id,
                         reader_id=reader_id, session=k)
            return self._case_payload(study_id, reader_id, k, sess, slot)

    def submit_rating(self, study_id: str, reader_id: str, k: int,
                      case_id: str, binary_call: str, birads: int) -> dict:
        if binary_call not in BINARY_CALLS:
            raise ValidationError(
                f"binary_call must be one of {BINARY_CALLS}; got {binary_call!r}")
        if not isinstance(birads, int) or isinstance(birads, bool) \
                or birads not in range(7):
            raise ValidationError(f"birads must be an integer 0-6; got {birads!r}")
        with self._lock:
            study = self._study(study_id)
            sess, slot = self._session(study, reader_id, k)
            order = slot["case_orders"][k - 1]
            if case_id not in study["plan"]["cases"]:
                raise NotFoundError(f"unknown case: {case_id}")
            if sess["state"] != "open":
                raise OrderConflictError(
                    f"session is {sess['state']}, not open")
            expected = order[sess["cursor"]]
            if case_id != expected:
                if case_id in order[:sess["cursor"]]:
                    raise OrderConflictError(
                        f"case {case_id} already rated")
                raise OrderConflictError(
                    f"out of order: expected case {expected}")
            self._commit("rating_submitted", study_id=study_id,
                         reader_id=reader_id, session=k, case_id=case_id,
                         binary_call=binary_call, birads=birads)
            if sess["state"] == "complete":
                return self._completion_payload(study, k, sess)
            return self._case_payload(study_id, reader_id, k, sess, slot)

    def pause(self, study_id: str, reader_id: str, k: int) -> dict:
        with self._lock:
            study = self._study(study_id)
            sess, _ = self._session(study, reader_id, k)
            if sess["state"] != "open":
                raise OrderConflictError(
                    f"cannot pause a {sess['state']} session")
            event = self._commit("paused", study_id=study_id,
                                 reader_id=reader_id, session=k)
            return blind_payload({"paused_at": _iso(event["ts"])})

    def resume(self, study_id: str, reader_id: str, k: int) -> dict:
        with self._lock:
            study = self._study(study_id)
            sess, slot = self._session(study, reader_id, k)
            if sess["state"] != "paused":
                raise OrderConflictError(
                    f"cannot resume a {sess['state']} session")
            self._commit("resumed", study_id=study_id,
                         reader_id=reader_id, session=k)
            return self._case_payload(study_id, reader_id, k, sess, slot)

    def export_ratings(self, study_id: str) -> list:
        """Submitted ratings as ReaderRating rows, submission order."""
        with self._lock:
            study = self._study(study_id)
            rows = []
            for rating in study["ratings"]:
                sess = study["sessions"][rating["reader_id"]][
                    str(rating["session"])]
                spans = sess["intervals"].get(rating["case_id"], [])
                closed = tuple((s, e) for s, e in spans if e is not None)
                rows.append(ReaderRating(
                    reader_id=rating["reader_id"],
                    case_id=rating["case_id"],
                    condition=rating["condition"],
                    binary_call=rating["binary_call"],
                    birads=rating["birads"],
                    intervals=closed))
            return rows

    def export_csv(self, study_id: str) -> str:
        rows = self.export_ratings(study_id)
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "ratings.csv"
            write_ratings_csv(rows, path)
            return path.read_text(encoding="utf-8")


def crash_recovery(store_path, clock=None) -> StudyStore:
    """Rebuild a store from its event log; refuses an empty log."""
    path = Path(store_path)
    events = load_events(path / EVENTS_FILE)
    if not events:
        raise EmptyLogError(f"empty event log under {store_path}")
    return StudyStore(path, clock=clock)


class CreateStudyBody(_pydantic.BaseModel):
    plan: dict
    assets: dict
    study_id: str | None = None


class RatingBody(_pydantic.BaseModel):
    binary_call: str
    birads: int


def create_app(store: StudyStore, tokens=None):
    """HTTP wrapper; ``tokens`` maps reader_id -> required bearer token."""
    app = FastAPI(title="mammochrome observer study")

    @app.exception_handler(StudyError)
    async def study_error(request: Request, exc: StudyError):
        detail = {"detail": str(exc)}
        if isinstance(exc, WashoutLockedError):
            detail["unlock_at"] = exc.unlock_at
        return JSONResponse(status_code=exc.status, content=detail)

    def check_token(reader_id: str, request: Request) -> None:
        if tokens is None:
            return
        expected = tokens.get(reader_id)
        header = request.headers.get("authorization", "")
        if not expected or header != f"Bearer {expected}":
            raise ForbiddenError(f"bad token for reader {reader_id}")

    @app.post("/studies", status_code=201)
    def create_study(body: CreateStudyBody):
        sid = store.create_study(body.plan, body.assets,
                                 study_id=body.study_id)
        return {"study_id": sid}

    @app.get("/studies/{study_id}")
    def get_study(study_id: str):
        return store.study_view(study_id)

    @app.post("/studies/{study_id}/readers/{reader_id}/sessions/{k}/open")
    def open_session(study_id: str, reader_id: str, k: int,
                     request: Request):
        check_token(reader_id, request)
        return store.open_session(study_id, reader_id, k)

    @app.post("/studies/{study_id}/readers/{reader_id}/sessions/{k}"
              "/cases/{case_id}/rating")
    def submit_rating(study_id: str, reader_id: str, k: int, case_id: str,
                      body: RatingBody, request: Request):
        check_token(reader_id, request)
        return store.submit_rating(study_id, reader_id, k, case_id,
                                   body.binary_call, body.birads)

    @app.post("/studies/{study_id}/readers/{reader_id}/sessions/{k}/pause")
    def pause(study_id: str, reader_id: str, k: int, request: Request):
        check_token(reader_id, request)
        return store.pause(study_id, reader_id, k)

    @app.post("/studies/{study_id}/readers/{reader_id}/sessions/{k}/resume")
    def resume(study_id: str, reader_id: str, k: int, request: Request):
        check_token(reader_id, request)
        return store.resume(study_id, reader_id, k)

    @app.get("/studies/{study_id}/export")
    def export(study_id: str):
        return PlainTextResponse(store.export_csv(study_id),
                                 media_type="text/csv")

    return app
