"""Dataset manifests, label mapping, patient-level splits, training regimes,
checkpoints, and view/breast scoring.

Manifests are JSONL, one case per line, unknown fields preserved. Checkpoints
are a small binary container (magic "MMC1") holding a canonical-JSON metadata
block and named float64 parameter payloads; load->save round trips are
byte-identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .diffcore import Optimizer, OptimizerConfig, ParamSet, Tape
from .imaging import load_png16
from .metrics import SingleClassError, auc_value
from .models import (
    BackboneConfig,
    ChromaConfig,
    HeadConfig,
    backbone_forward,
    bind,
    chroma_forward,
    head_forward,
    init_backbone,
    init_chroma,
    init_head,
)

LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")
DENSITIES = ("A", "B", "C", "D", "NR")
FINDING_VOCAB = ("mass", "calcification", "asymmetry", "distortion", "none")

NEGATIVE = "negative"
POSITIVE = "positive"
EXCLUDED = "excluded"

REGIMES = ("tdce", "gray-baseline", "gray-frozen")


class ManifestError(ValueError):
    """Malformed manifest content."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes violate the container format."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries where it happened."""


# ---------------------------------------------------------------------------
# case records and manifests
# ---------------------------------------------------------------------------


def normalize_birads(birads) -> tuple[int, str]:
    """Return (category 0..6, canonical string). 4A/4B/4C collapse to 4."""
    raw = str(birads).strip().upper()
    if raw in ("4A", "4B", "4C"):
        return 4, raw
    try:
        cat = int(raw)
    except ValueError:
        raise ManifestError(f"unrecognized BI-RADS value {birads!r}") from None
    if not 0 <= cat <= 6:
        raise ManifestError(f"BI-RADS category out of range: {birads!r}")
    return cat, str(cat)


def map_birads_to_label(birads) -> str:
    """1-3 -> negative, 4-6 (incl. 4A-4C) -> positive, 0 -> excluded."""
    cat, _ = normalize_birads(birads)
    if cat == 0:
        return EXCLUDED
    return NEGATIVE if cat <= 3 else POSITIVE


def density_group(density: str) -> str:
    """A/B -> non-dense, C/D -> dense, NR stays NR (kept out of subgroups)."""
    if density in ("A", "B"):
        return "non-dense"
    if density in ("C", "D"):
        return "dense"
    if density == "NR":
        return "NR"
    raise ManifestError(f"unknown density {density!r}")


@dataclass
class CaseRecord:
    """One acquired view with its report fields."""
    patient_id: str
    study_id: str
    laterality: str
    view: str
    birads: str
    density: str
    findings: tuple
    image_path: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.laterality not in LATERALITIES:
            raise ManifestError(f"laterality must be L or R, got {self.laterality!r}")
        if self.view not in VIEWS:
            raise ManifestError(f"view must be CC or MLO, got {self.view!r}")
        _, canon = normalize_birads(self.birads)
        self.birads = canon
        if self.density not in DENSITIES:
            raise ManifestError(f"density must be one of {DENSITIES}, got {self.density!r}")
        self.findings = tuple(self.findings)
        for f in self.findings:
            if f not in FINDING_VOCAB:
                raise ManifestError(f"unknown finding {f!r}")

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.study_id, self.laterality, self.view)

    @property
    def birads_category(self) -> int:
        return normalize_birads(self.birads)[0]

    @property
    def label(self) -> str:
        return map_birads_to_label(self.birads)

    @staticmethod
    def from_dict(d: dict) -> "CaseRecord":
        d = dict(d)
        try:
            fields = {name: d.pop(name) for name in
                      ("patient_id", "study_id", "laterality", "view",
                       "birads", "density", "image_path")}
        except KeyError as e:
            raise ManifestError(f"manifest record missing field {e.args[0]!r}") from None
        findings = tuple(d.pop("findings", ()))
        return CaseRecord(findings=findings, extra=d, **fields)

    def to_dict(self) -> dict:
        out = {
            "patient_id": self.patient_id,
            "study_id": self.study_id,
            "laterality": self.laterality,
            "view": self.view,
            "birads": self.birads,
            "density": self.density,
            "findings": list(self.findings),
            "image_path": self.image_path,
        }
        for k in sorted(self.extra):
            out.setdefault(k, self.extra[k])
        return out


def read_manifest(path) -> list[CaseRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e})") from None
            rec = CaseRecord.from_dict(d)
            if rec.key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate view key {rec.key}")
            seen.add(rec.key)
            records.append(rec)
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


# ---------------------------------------------------------------------------
# patient-level splitting
# ---------------------------------------------------------------------------


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    base = [math.floor(e) for e in exact]
    left = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def split_patients(records, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                   birads6_partition: str = "test") -> dict:
    """Partition whole patients into train/val/test.

    Allocation uses largest-remainder counts over a seeded shuffle of the
    sorted patient ids, so the same seed always yields the same split and no
    patient ever straddles partitions. Patients carrying a BI-RADS 6 study
    are routed to birads6_partition first (default: evaluation only); pass
    birads6_partition=None to treat them like everyone else.
    """
    records = list(records)
    if not records:
        raise ManifestError("cannot split an empty manifest")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    names = ("train", "val", "test")
    if birads6_partition is not None and birads6_partition not in names:
        raise ValueError(f"birads6_partition must be one of {names} or None")

    by_patient: dict = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    forced = set()
    if birads6_partition is not None:
        forced = {pid for pid, recs in by_patient.items()
                  if any(r.birads_category == 6 for r in recs)}
    free = sorted(pid for pid in by_patient if pid not in forced)
    rng = np.random.default_rng(seed)
    order = [free[i] for i in rng.permutation(len(free))]
    counts = _largest_remainder(len(order), ratios)
    assign: dict = {}
    pos = 0
    for name, count in zip(names, counts):
        for pid in order[pos:pos + count]:
            assign[pid] = name
        pos += count
    for pid in forced:
        assign[pid] = birads6_partition
    out = {name: [] for name in names}
    for rec in records:  # manifest order preserved within each partition
        out[assign[rec.patient_id]].append(rec)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MMC1"


@dataclass
class ModelCheckpoint:
    metadata: dict
    params: ParamSet


def checkpoint_to_bytes(ck: ModelCheckpoint) -> bytes:
    meta = json.dumps(ck.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", len(meta))
    out += meta
    items = list(ck.params.items())
    out += struct.pack("<I", len(items))
    for name, p in items:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BB", int(p.trainable), p.value.ndim)
        out += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
    return bytes(out)


def checkpoint_from_bytes(data: bytes) -> ModelCheckpoint:
    view = memoryview(data)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise CheckpointFormatError("truncated checkpoint")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"metadata block unreadable: {e}") from None
    (n_params,) = struct.unpack("<I", take(4))
    params = ParamSet()
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        trainable, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params.add(name, values.astype(np.float64), trainable=bool(trainable))
    if len(view):
        raise CheckpointFormatError(f"{len(view)} trailing bytes after payload")
    return ModelCheckpoint(metadata=metadata, params=params)


def save_checkpoint(ck: ModelCheckpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(ck))


def load_checkpoint(path) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything a training run needs; the seed is mandatory on purpose."""
    seed: int
    regime: str = "tdce"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    input_size: tuple = (64, 64)
    chroma: ChromaConfig = field(default_factory=ChromaConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.head is None:
            self.head = HeadConfig(in_features=self.backbone.feature_dim)
        if self.head.in_features != self.backbone.feature_dim:
            raise ValueError("head input width must match backbone feature width")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "regime": self.regime, "epochs": self.epochs,
            "batch_size": self.batch_size, "lr": self.lr,
            "optimizer": self.optimizer, "weight_decay": self.weight_decay,
            "input_size": list(self.input_size),
            "chroma": self.chroma.to_dict(),
            "backbone": self.backbone.to_dict(),
            "head": self.head.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            seed=d["seed"], regime=d.get("regime", "tdce"),
            epochs=d.get("epochs", 20), batch_size=d.get("batch_size", 16),
            lr=d.get("lr", 1e-3), optimizer=d.get("optimizer", "adam"),
            weight_decay=d.get("weight_decay", 0.0),
            input_size=tuple(d.get("input_size", (64, 64))),
            chroma=ChromaConfig.from_dict(d["chroma"]) if "chroma" in d else ChromaConfig(),
            backbone=BackboneConfig.from_dict(d["backbone"]) if "backbone" in d else BackboneConfig(),
            head=HeadConfig.from_dict(d["head"]) if "head" in d else None,
        )


def build_params(cfg: TrainConfig) -> ParamSet:
    """Seeded init. Each component draws from its own seed stream so the
    frozen backbone is bit-identical across regimes for a given seed."""
    params = ParamSet()
    rng_chroma = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rng_backbone = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    rng_head = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    if cfg.regime == "tdce":
        init_chroma(params, cfg.chroma, rng_chroma, trainable=True)
        init_backbone(params, cfg.backbone, rng_backbone, trainable_stages=set())
    elif cfg.regime == "gray-baseline":
        last = len(cfg.backbone.widths) - 1
        init_backbone(params, cfg.backbone, rng_backbone, trainable_stages={last})
    else:  # gray-frozen
        init_backbone(params, cfg.backbone, rng_backbone, trainable_stages=set())
    init_head(params, cfg.head, rng_head, trainable=True)
    return params


def _forward_logits(cfg: TrainConfig, pv: dict, tape: Tape, x: np.ndarray):
    """Batched (n,1,h,w) -> (n,1) logits under the configured regime."""
    if cfg.regime == "tdce":
        t = tape.var(x)
        rgb = chroma_forward(cfg.chroma, pv, t)
    else:
        rgb = tape.var(np.repeat(x, 3, axis=1))
    feats = backbone_forward(cfg.backbone, pv, rgb)
    return head_forward(cfg.head, pv, feats)


def score_batch(cfg: TrainConfig, params: ParamSet, x: np.ndarray,
                chunk: int = 32) -> np.ndarray:
    """Suspicion probabilities for a (n,1,h,w) batch, no gradients kept."""
    probs = []
    for lo in range(0, len(x), chunk):
        tape = Tape()
        pv = bind(params, tape)
        logits = _forward_logits(cfg, pv, tape, x[lo:lo + chunk])
        probs.append(expit(logits.value.ravel()))
        tape.release()
    return np.concatenate(probs) if probs else np.zeros(0)


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: list
    best_epoch: int


def train_model(cfg: TrainConfig, train_x: np.ndarray, train_y: np.ndarray,
                val_x: np.ndarray, val_y: np.ndarray, log=None) -> TrainResult:
    """Minibatch training with per-epoch validation.

    The optimizer only ever touches trainable parameters; the frozen subset
    is hash-checked before and after as a belt-and-braces guarantee. The
    best epoch is the one with the highest validation AUC (validation loss
    when the validation labels are single-class).
    """
    for name, arr in (("train_x", train_x), ("val_x", val_x)):
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != cfg.input_size:
            raise ValueError(f"{name} must be (n,1,{cfg.input_size[0]},{cfg.input_size[1]}),"
                             f" got {arr.shape}")
    train_y = np.asarray(train_y, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if len(train_x) == 0:
        raise ValueError("empty training set")

    params = build_params(cfg)
    frozen_names = params.frozen_names()
    frozen_hash = params.subset_hash(frozen_names)
    opt = Optimizer(OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr,
                                    weight_decay=cfg.weight_decay))
    n = len(train_x)
    history = []
    best = None  # (selection value, epoch, values snapshot)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 100 + epoch])).permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            tape = Tape()
            pv = bind(params, tape)
            logits = _forward_logits(cfg, pv, tape, train_x[idx])
            loss = dc.bce_with_logits(logits, train_y[idx])
            lval = float(loss.value)
            if not math.isfinite(lval):
                raise TrainingDivergedError(
                    f"non-finite loss {lval} at epoch {epoch}, batch {lo // cfg.batch_size}")
            tape.backward(loss)
            grads = {name: pv[name].grad for name in pv}
            for name in params.trainable_names():
                if not np.isfinite(grads[name]).all():
                    raise TrainingDivergedError(
                        f"non-finite gradient for {name} at epoch {epoch}, "
                        f"batch {lo // cfg.batch_size} (loss {lval:.6g})")
            opt.step(params, grads)
            batch_losses.append(lval)
        train_loss = float(np.mean(batch_losses))

        entry = {"epoch": epoch, "train_loss": train_loss}
        if len(val_x):
            val_scores = score_batch(cfg, params, val_x)
            with np.errstate(divide="ignore"):
                z = np.log(val_scores) - np.log1p(-val_scores)
            entry["val_loss"] = _bce_from_logits(
                np.clip(z, -500, 500), val_y)
            try:
                entry["val_auc"] = auc_value(val_scores, val_y.astype(int))
                selection = entry["val_auc"]
            except SingleClassError:
                entry["val_auc"] = None
                selection = -entry["val_loss"]
        else:
            selection = -train_loss
        history.append(entry)
        if log:
            log(entry)
        if best is None or selection > best[0]:
            snapshot = {name: p.value.copy() for name, p in params.items()}
            best = (selection, epoch, snapshot)

    for name, values in best[2].items():
        params[name].value[...] = values
    if params.subset_hash(frozen_names) != frozen_hash:
        raise RuntimeError("frozen parameters changed during training")

    metadata = {
        "schema_version": 1,
        "kind": "model",
        "train_config": cfg.to_dict(),
        "regime": cfg.regime,
        "trainable": sorted(params.trainable_names()),
        "best_epoch": best[1],
        "best_val_auc": history[best[1]].get("val_auc") if history else None,
        "history": history,
    }
    return TrainResult(checkpoint=ModelCheckpoint(metadata=metadata, params=params),
                       history=history, best_epoch=best[1])


# ---------------------------------------------------------------------------
# manifest-level training and prediction
# ---------------------------------------------------------------------------


def load_views(records, image_root=None, input_size=(64, 64),
               include_excluded=False):
    """Read each record's image as a (1,h,w) float64 plane in [0,1].

    Returns (x, y, kept_records, failures). Records whose image is missing
    or the wrong size are reported in failures and skipped; excluded-label
    records are dropped from training arrays unless asked for.
    """
    xs, ys, kept, failures = [], [], [], []
    root = Path(image_root) if image_root else None
    for rec in records:
        label = rec.label
        if label == EXCLUDED and not include_excluded:
            continue
        path = Path(rec.image_path)
        if root and not path.is_absolute():
            path = root / path
        try:
            img = load_png16(path)
        except (OSError, ValueError) as e:
            failures.append({"key": list(rec.key), "image_path": str(path),
                             "error": str(e)})
            continue
        if (img.height, img.width) != tuple(input_size):
            failures.append({"key": list(rec.key), "image_path": str(path),
                             "error": f"expected {input_size} image, got "
                                      f"({img.height}, {img.width})"})
            continue
        xs.append(img.pixels.astype(np.float64)[np.newaxis] / img.max_value)
        ys.append(1.0 if label == POSITIVE else 0.0)
        kept.append(rec)
    x = np.stack(xs) if xs else np.zeros((0, 1) + tuple(input_size))
    return x, np.array(ys), kept, failures


def _train_from_manifests(cfg: TrainConfig, train_records, val_records,
                          image_root=None, log=None) -> TrainResult:
    tx, ty, _, fail_t = load_views(train_records, image_root, cfg.input_size)
    vx, vy, _, fail_v = load_views(val_records, image_root, cfg.input_size)
    if fail_t or fail_v:
        raise ManifestError(f"{len(fail_t) + len(fail_v)} unreadable training images; "
                            f"first: {(fail_t + fail_v)[0]}")
    return train_model(cfg, tx, ty, vx, vy, log=log)


def train_tdce(cfg: TrainConfig, train_records, val_records,
               image_root=None, log=None) -> TrainResult:
    """Chromatic encoder + head learn through the frozen backbone."""
    if cfg.regime != "tdce":
        raise ValueError(f"train_tdce requires regime 'tdce', got {cfg.regime!r}")
    return _train_from_manifests(cfg, train_records, val_records, image_root, log)


def train_gray_baseline(cfg: TrainConfig, train_records, val_records,
                        image_root=None, log=None) -> TrainResult:
    """Channel-replicated input; last backbone stage + head fine-tuned."""
    if cfg.regime != "gray-baseline":
        raise ValueError(f"train_gray_baseline requires regime 'gray-baseline', "
                         f"got {cfg.regime!r}")
    return _train_from_manifests(cfg, train_records, val_records, image_root, log)


@dataclass
class PredictionRecord:
    """A scored view (or breast when view is None)."""
    patient_id: str
    study_id: str
    laterality: str
    view: str | None
    score: float
    label: str
    density_group: str
    findings: tuple

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0,1], got {self.score}")
        if self.label not in (NEGATIVE, POSITIVE, EXCLUDED):
            raise ValueError(f"bad label {self.label!r}")


def predict_views(checkpoint: ModelCheckpoint, records, image_root=None,
                  chunk: int = 32):
    """Score every readable view; unreadable ones are reported, not fatal.

    Excluded-label views are scored and flagged so downstream metric code
    can drop them.
    """
    cfg = TrainConfig.from_dict(checkpoint.metadata["train_config"])
    x, _, kept, failures = load_views(records, image_root, cfg.input_size,
                                      include_excluded=True)
    scores = score_batch(cfg, checkpoint.params, x, chunk=chunk)
    preds = []
    for rec, score in zip(kept, scores):
        preds.append(PredictionRecord(
            patient_id=rec.patient_id, study_id=rec.study_id,
            laterality=rec.laterality, view=rec.view, score=float(score),
            label=rec.label, density_group=density_group(rec.density),
            findings=rec.findings))
    return preds, failures


def aggregate_breast(view_preds) -> list[PredictionRecord]:
    """Collapse view scores to one record per breast: score is the max over
    available views, the label is shared, findings are unioned."""
    view_preds = list(view_preds)
    if not view_preds:
        raise ValueError("no view predictions to aggregate")
    groups: dict = {}
    order = []
    for p in view_preds:
        key = (p.patient_id, p.study_id, p.laterality)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(p)
    out = []
    for key in order:
        members = groups[key]
        labels = {m.label for m in members}
        if len(labels) > 1:
            raise ValueError(f"conflicting labels {sorted(labels)} for breast {key}")
        findings = sorted({f for m in members for f in m.findings})
        out.append(PredictionRecord(
            patient_id=key[0], study_id=key[1], laterality=key[2], view=None,
            score=max(m.score for m in members), label=members[0].label,
            density_group=members[0].density_group, findings=tuple(findings)))
    return out


PREDICTION_CSV_HEADER = "patient_id,study_id,laterality,view,score,label,density,findings"


def write_predictions_csv(preds, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(PREDICTION_CSV_HEADER + "\n")
        for p in preds:
            fh.write(",".join([
                p.patient_id, p.study_id, p.laterality, p.view or "",
                repr(p.score), p.label, p.density_group, "|".join(p.findings),
            ]) + "\n")


def read_predictions_csv(path) -> list[PredictionRecord]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != PREDICTION_CSV_HEADER:
            raise ValueError(f"unexpected prediction CSV header: {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"bad prediction row: {line!r}")
            preds.append(PredictionRecord(
                patient_id=parts[0], study_id=parts[1], laterality=parts[2],
                view=parts[3] or None, score=float(parts[4]), label=parts[5],
                density_group=parts[6],
                findings=tuple(f for f in parts[7].split("|") if f)))
    return preds


def to_metric_dicts(preds, drop_excluded: bool = True) -> list[dict]:
    """Rows for the statistics layer; excluded labels never pass through."""
    out = []
    for p in preds:
        if p.label == EXCLUDED:
            if drop_excluded:
                continue
            raise ValueError("excluded-label record cannot enter metrics")
        out.append({
            "patient_id": p.patient_id,
            "score": p.score,
            "label": 1 if p.label == POSITIVE else 0,
            "density_group": p.density_group,
            "findings": p.findings,
        })
    return out
