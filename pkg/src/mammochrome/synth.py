"""Synthetic lesion dataset and the two-regime comparison experiment.

The generator produces patient-grouped grayscale images where the class
signal is a small fixed aperiodic texture patch: positives carry +pattern,
negatives carry -pattern at a random location. Both classes therefore have
identical patch energy and power spectrum; only the sign (phase) differs.
Because the pattern is zero-mean, a frozen random conv stage has no
first-order response difference between the classes, so a linear probe on
frozen pooled features stays near chance while a trainable encoder can
rectify the matched-filter response and make the signal visible to the
frozen backbone. That is the effect the comparison experiment measures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .imaging import RawImage, bilinear_resize, quantize, write_gray_png
from .metrics import DelongResult, auc_value, delong_paired
from .models import BackboneConfig, ChromaConfig, HeadConfig
from .pipeline import (
    CaseRecord,
    TrainConfig,
    train_model,
    score_batch,
    split_patients,
    write_manifest,
)

DENSITY_CYCLE = ("A", "B", "C", "D")


@dataclass
class SynthConfig:
    """Knobs for the generated set; defaults give 500 patients x 4 views."""
    n_patients: int = 500
    size: tuple = (32, 32)
    pattern_size: int = 10
    n_patches: int = 3
    amplitude: float = 0.30
    blob_scale: float = 0.06
    noise_scale: float = 0.02
    base_level: float = 0.45
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        if self.pattern_size > min(self.size):
            raise ValueError("pattern larger than the image")
        if self.n_patches < 1:
            raise ValueError("need at least one patch per image")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must be in (0, 1)")


@dataclass
class SynthDataset:
    x: np.ndarray          # (n, 1, h, w) float64 in [0, 1]
    y: np.ndarray          # (n,) int labels
    records: list          # CaseRecord per image, aligned with x
    pattern: np.ndarray    # the shared lesion texture, zero-mean


def make_pattern(size: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced +-1 texture patch; exactly zero-mean, aperiodic."""
    n = size * size
    if n % 2:
        raise ValueError("pattern size must give an even cell count")
    flat = np.array([1.0] * (n // 2) + [-1.0] * (n // 2))
    return flat[rng.permutation(n)].reshape(size, size)


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency unit-scale clutter: coarse noise upsampled bilinearly."""
    coarse = rng.normal(0.0, 1.0, size=(max(2, h // 4), max(2, w // 4)))
    return bilinear_resize(coarse, h, w)


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """Patient-grouped synthetic set; every view of a positive patient
    carries the +pattern patch, every negative view the -pattern patch."""
    h, w = cfg.size
    k = cfg.pattern_size
    pattern = make_pattern(k, np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0])))
    n_pos = round(cfg.n_patients * cfg.positive_fraction)
    xs, ys, records = [], [], []
    for p in range(cfg.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + p]))
        positive = p < n_pos
        patient_blob = _smooth_field(rng, h, w)
        pid = f"p{p:04d}"
        density = DENSITY_CYCLE[p % 4]
        for v, (lat, view) in enumerate(
                (("L", "CC"), ("L", "MLO"), ("R", "CC"), ("R", "MLO"))):
            blob = 0.7 * patient_blob + 0.7 * _smooth_field(rng, h, w)
            img = (cfg.base_level + cfg.blob_scale * blob
                   + cfg.noise_scale * rng.normal(0.0, 1.0, size=(h, w)))
            sign = 1.0 if positive else -1.0
            placed = []
            for _ in range(cfg.n_patches):
                # prefer disjoint placements; fall back to overlap if the
                # image is too crowded (the sign-flip symmetry survives it)
                for _attempt in range(100):
                    r0 = int(rng.integers(0, h - k + 1))
                    c0 = int(rng.integers(0, w - k + 1))
                    if all(abs(r0 - r) >= k or abs(c0 - c) >= k
                           for r, c in placed):
                        break
                placed.append((r0, c0))
                img[r0:r0 + k, c0:c0 + k] += cfg.amplitude * sign * pattern
            xs.append(np.clip(img, 0.0, 1.0))
            ys.append(int(positive))
            records.append(CaseRecord(
                patient_id=pid, study_id=f"s{p:04d}", laterality=lat,
                view=view, birads="5" if positive else "1", density=density,
                findings=("mass",) if positive else (),
                image_path=f"images/{pid}_{lat}_{view}.png"))
    x = np.stack(xs)[:, np.newaxis, :, :]
    return SynthDataset(x=x, y=np.array(ys, dtype=int), records=records,
                        pattern=pattern)


def write_synthetic_dataset(cfg: SynthConfig, out_dir) -> str:
    """Materialize the set as 16-bit PNGs plus a manifest; returns its path."""
    from pathlib import Path

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg)
    for img, rec in zip(ds.x[:, 0], ds.records):
        pixels = quantize(img, 16)
        raw = RawImage(width=img.shape[1], height=img.shape[0],
                       bit_depth=16, pixels=pixels)
        write_gray_png(raw, out_dir / rec.image_path)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(ds.records, manifest)
    return str(manifest)


def experiment_train_config(seed: int, regime: str, epochs: int = 15,
                            batch_size: int = 16, lr: float = 2e-3,
                            size: tuple = (32, 32)) -> TrainConfig:
    """The small architecture both regimes share in the comparison run."""
    backbone = BackboneConfig(widths=(8, 16, 32, 32))
    return TrainConfig(
        seed=seed, regime=regime, epochs=epochs, batch_size=batch_size,
        lr=lr, input_size=size,
        chroma=ChromaConfig(depth=2, base_channels=8),
        backbone=backbone,
        head=HeadConfig(hidden=16, in_features=backbone.feature_dim))


@dataclass
class RegimeComparison:
    """One seed's head-to-head: learned encoding vs frozen gray baseline."""
    seed: int
    auc_tdce: float
    auc_gray: float
    delong: DelongResult
    n_test: int
    best_epoch_tdce: int
    best_epoch_gray: int
    train_seconds: dict
    scores_tdce: np.ndarray = field(repr=False, default=None)
    scores_gray: np.ndarray = field(repr=False, default=None)
    test_y: np.ndarray = field(repr=False, default=None)

    @property
    def delta(self) -> float:
        return self.auc_tdce - self.auc_gray

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "auc_tdce": self.auc_tdce,
            "auc_gray": self.auc_gray,
            "delta": self.delta,
            "delong_p": self.delong.p,
            "n_test": self.n_test,
            "best_epoch_tdce": self.best_epoch_tdce,
            "best_epoch_gray": self.best_epoch_gray,
            "train_seconds": dict(self.train_seconds),
        }


def _partition_arrays(ds: SynthDataset, seed: int, ratios=(0.5, 0.1, 0.4)):
    """Patient-level split of the in-memory set, reusing the manifest splitter."""
    split = split_patients(ds.records, ratios=ratios, seed=seed,
                           birads6_partition=None)
    index = {rec.key: i for i, rec in enumerate(ds.records)}
    out = {}
    for name, recs in split.items():
        idx = np.array([index[r.key] for r in recs], dtype=int)
        out[name] = (ds.x[idx], ds.y[idx])
    return out


def compare_regimes(seed: int, data_cfg: SynthConfig | None = None,
                    epochs: int = 14, gray_epochs: int = 8,
                    batch_size: int = 16, lr: float = 2e-3,
                    ratios=(0.5, 0.1, 0.4), log=None) -> RegimeComparison:
    """Train the learned-encoding and frozen-gray regimes on one synthetic
    set and compare their test AUCs.

    Both regimes share the data, the patient split, and (by seed-stream
    construction) bit-identical frozen backbone weights, so the contrast
    isolates what the trainable encoder adds. The frozen-gray comparator
    trains only its head and plateaus within a few epochs, so it gets a
    shorter schedule; best epoch is validation-selected for both.
    """
    data_cfg = data_cfg or SynthConfig(seed=seed)
    ds = generate_dataset(data_cfg)
    parts = _partition_arrays(ds, seed, ratios=ratios)
    train_x, train_y = parts["train"]
    val_x, val_y = parts["val"]
    test_x, test_y = parts["test"]

    results = {}
    scores = {}
    seconds = {}
    for regime, n_epochs in (("tdce", epochs), ("gray-frozen", gray_epochs)):
        cfg = experiment_train_config(seed, regime, epochs=n_epochs,
                                      batch_size=batch_size, lr=lr,
                                      size=data_cfg.size)
        t0 = time.perf_counter()
        results[regime] = train_model(cfg, train_x, train_y, val_x, val_y,
                                      log=log)
        seconds[regime] = time.perf_counter() - t0
        scores[regime] = score_batch(cfg, results[regime].checkpoint.params,
                                     test_x)

    s_t = scores["tdce"]
    s_g = scores["gray-frozen"]
    return RegimeComparison(
        seed=seed,
        auc_tdce=auc_value(s_t, test_y),
        auc_gray=auc_value(s_g, test_y),
        delong=delong_paired(s_t, s_g, test_y),
        n_test=len(test_y),
        best_epoch_tdce=results["tdce"].best_epoch,
        best_epoch_gray=results["gray-frozen"].best_epoch,
        train_seconds=seconds,
        scores_tdce=s_t, scores_gray=s_g, test_y=test_y)
