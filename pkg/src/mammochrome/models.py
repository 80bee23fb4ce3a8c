"""Network definitions: chromatic encoder, frozen conv backbone, MLP head,
plus the non-learned channel-replication and fixed-colormap baselines.

The chromatic encoder is a small U-Net: strided context capture on the way
down, nearest-upsample + conv with skip concatenation on the way up, and a
final 1x1 conv + sigmoid so the three output channels are a displayable
image. The backbone is a 4-stage strided conv stack ending in global average
pooling; it stands in for a large pretrained feature extractor and is
normally frozen, with seeded-random init or weights loaded from an external
checkpoint file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, Tape, Var


@dataclass
class ChromaConfig:
    """Encoder-decoder for 1-channel -> 3-channel encoding."""
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 3

    def __post_init__(self):
        if self.out_channels != 3:
            raise ValueError("chromatic encoder must emit 3 channels")
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "base_channels": self.base_channels,
                "in_channels": self.in_channels, "out_channels": self.out_channels}

    @staticmethod
    def from_dict(d: dict) -> "ChromaConfig":
        return ChromaConfig(**d)


@dataclass
class BackboneConfig:
    """Strided conv stages + global average pool."""
    widths: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3
    frozen: bool = True
    init: str = "seeded-random"  # or "external-checkpoint"
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "in_channels": self.in_channels,
                "frozen": self.frozen, "init": self.init,
                "checkpoint_path": self.checkpoint_path}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return BackboneConfig(**d)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass
class HeadConfig:
    hidden: int = 64
    in_features: int = 128

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "in_features": self.in_features}

    @staticmethod
    def from_dict(d: dict) -> "HeadConfig":
        return HeadConfig(**d)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


def _he_dense(rng: np.random.Generator, din: int, dout: int) -> np.ndarray:
    std = np.sqrt(2.0 / din)
    return rng.normal(0.0, std, size=(din, dout))


def init_chroma(params: ParamSet, cfg: ChromaConfig, rng: np.random.Generator,
                prefix: str = "chroma.", trainable: bool = True) -> None:
    ch = cfg.in_channels
    for lvl in range(cfg.depth):
        out = cfg.base_channels * (2 ** lvl)
        params.add(f"{prefix}enc{lvl}.w", _he_conv(rng, out, ch, 3), trainable)
        params.add(f"{prefix}enc{lvl}.b", np.zeros(out), trainable)
        ch = out
    mid = cfg.base_channels * (2 ** cfg.depth)
    params.add(f"{prefix}mid.w", _he_conv(rng, mid, ch, 3), trainable)
    params.add(f"{prefix}mid.b", np.zeros(mid), trainable)
    ch = mid
    for lvl in reversed(range(cfg.depth)):
        out = cfg.base_channels * (2 ** lvl)
        params.add(f"{prefix}dec{lvl}.up.w", _he_conv(rng, out, ch, 3), trainable)
        params.add(f"{prefix}dec{lvl}.up.b", np.zeros(out), trainable)
        params.add(f"{prefix}dec{lvl}.merge.w", _he_conv(rng, out, 2 * out, 3), trainable)
        params.add(f"{prefix}dec{lvl}.merge.b", np.zeros(out), trainable)
        ch = out
    params.add(f"{prefix}final.w", _he_conv(rng, cfg.out_channels, ch, 1), trainable)
    params.add(f"{prefix}final.b", np.zeros(cfg.out_channels), trainable)


def init_backbone(params: ParamSet, cfg: BackboneConfig, rng: np.random.Generator,
                  prefix: str = "backbone.", trainable_stages: set[int] | None = None) -> None:
    """trainable_stages overrides cfg.frozen per stage (used by the partially
    fine-tuned baseline); None means every stage follows cfg.frozen."""
    ch = cfg.in_channels
    for i, width in enumerate(cfg.widths):
        trainable = (i in trainable_stages) if trainable_stages is not None else not cfg.frozen
        params.add(f"{prefix}stage{i}.a.w", _he_conv(rng, width, ch, 3), trainable)
        params.add(f"{prefix}stage{i}.a.b", np.zeros(width), trainable)
        params.add(f"{prefix}stage{i}.b.w", _he_conv(rng, width, width, 3), trainable)
        params.add(f"{prefix}stage{i}.b.b", np.zeros(width), trainable)
        ch = width


def init_head(params: ParamSet, cfg: HeadConfig, rng: np.random.Generator,
              prefix: str = "head.", trainable: bool = True) -> None:
    params.add(f"{prefix}fc1.w", _he_dense(rng, cfg.in_features, cfg.hidden), trainable)
    params.add(f"{prefix}fc1.b", np.zeros(cfg.hidden), trainable)
    params.add(f"{prefix}fc2.w", _he_dense(rng, cfg.hidden, 1), trainable)
    params.add(f"{prefix}fc2.b", np.zeros(1), trainable)


def bind(params: ParamSet, tape: Tape) -> dict[str, Var]:
    """Wrap every parameter as a Var on the given tape for one forward pass."""
    return {name: tape.var(p.value) for name, p in params.items()}


# ---------------------------------------------------------------------------
# forward passes (batched NCHW)
# ---------------------------------------------------------------------------


def chroma_forward(cfg: ChromaConfig, pv: dict[str, Var], x: Var,
                   prefix: str = "chroma.") -> Var:
    """(n, 1, h, w) -> (n, 3, h, w), all outputs in [0, 1] via sigmoid."""
    h, w = x.value.shape[2], x.value.shape[3]
    mult = 2 ** cfg.depth
    if h % mult or w % mult:
        raise dc.ShapeError(
            f"chromatic encoder needs spatial dims divisible by {mult}, got {h}x{w}")
    skips = []
    t = x
    for lvl in range(cfg.depth):
        t = dc.relu(dc.conv2d(t, pv[f"{prefix}enc{lvl}.w"], pv[f"{prefix}enc{lvl}.b"]))
        skips.append(t)
        t = dc.max_pool2(t)
    t = dc.relu(dc.conv2d(t, pv[f"{prefix}mid.w"], pv[f"{prefix}mid.b"]))
    for lvl in reversed(range(cfg.depth)):
        t = dc.upsample_nearest2(t)
        t = dc.relu(dc.conv2d(t, pv[f"{prefix}dec{lvl}.up.w"], pv[f"{prefix}dec{lvl}.up.b"]))
        t = dc.concat_channels(t, skips[lvl])
        t = dc.relu(dc.conv2d(t, pv[f"{prefix}dec{lvl}.merge.w"], pv[f"{prefix}dec{lvl}.merge.b"]))
    t = dc.conv2d(t, pv[f"{prefix}final.w"], pv[f"{prefix}final.b"])
    return dc.sigmoid(t)


def backbone_forward(cfg: BackboneConfig, pv: dict[str, Var], rgb: Var,
                     prefix: str = "backbone.") -> Var:
    """(n, 3, h, w) -> (n, feature_dim) pooled features."""
    t = rgb
    for i in range(len(cfg.widths)):
        stride = 1 if i == 0 else 2
        t = dc.relu(dc.conv2d(t, pv[f"{prefix}stage{i}.a.w"], pv[f"{prefix}stage{i}.a.b"], stride=stride))
        t = dc.relu(dc.conv2d(t, pv[f"{prefix}stage{i}.b.w"], pv[f"{prefix}stage{i}.b.b"]))
    return dc.global_avg_pool(t)


def head_forward(cfg: HeadConfig, pv: dict[str, Var], feats: Var,
                 prefix: str = "head.") -> Var:
    """(n, in_features) -> (n, 1) logits."""
    t = dc.relu(dc.dense(feats, pv[f"{prefix}fc1.w"], pv[f"{prefix}fc1.b"]))
    return dc.dense(t, pv[f"{prefix}fc2.w"], pv[f"{prefix}fc2.b"])


# ---------------------------------------------------------------------------
# single-image convenience API
# ---------------------------------------------------------------------------


def chroma_encode(params: ParamSet, cfg: ChromaConfig, values: np.ndarray) -> np.ndarray:
    """Encode one (h, w) image in [0,1] to a (3, h, w) image in [0,1]."""
    tape = Tape()
    pv = bind(params, tape)
    x = tape.var(values[np.newaxis, np.newaxis, :, :])
    out = chroma_forward(cfg, pv, x).value[0]
    tape.release()
    return out


def classify(params: ParamSet, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
             rgb: np.ndarray) -> float:
    """Suspicion probability for one (3, h, w) image."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise dc.ShapeError(f"classify expects a (3, h, w) image, got {rgb.shape}")
    tape = Tape()
    pv = bind(params, tape)
    feats = backbone_forward(backbone_cfg, pv, tape.var(rgb[np.newaxis]))
    logit = head_forward(head_cfg, pv, feats)
    tape.release()
    return float(1.0 / (1.0 + np.exp(-logit.value[0, 0])))


def replicate_channels(values: np.ndarray) -> np.ndarray:
    """Copy a (h, w) grayscale image into all three channels."""
    if values.ndim != 2:
        raise dc.ShapeError(f"replicate_channels expects (h, w), got {values.shape}")
    return np.repeat(values[np.newaxis], 3, axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# fixed colormaps (baseline comparator)
# ---------------------------------------------------------------------------


@dataclass
class ColormapTable:
    """Piecewise-linear intensity -> RGB anchors.

    Anchor intensities must be strictly increasing from 0 to 1; components
    must lie in [0, 1].
    """
    anchors: list[tuple[float, tuple[float, float, float]]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.anchors) < 2:
            raise ValueError("colormap table needs at least 2 anchors")
        xs = [a[0] for a in self.anchors]
        if xs[0] != 0.0 or xs[-1] != 1.0:
            raise ValueError("anchor intensities must start at 0 and end at 1")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("anchor intensities must be strictly increasing")
        for _, rgb in self.anchors:
            if len(rgb) != 3 or any(not (0.0 <= c <= 1.0) for c in rgb):
                raise ValueError("anchor colors must be RGB triples in [0, 1]")


def apply_colormap(values: np.ndarray, table: ColormapTable) -> np.ndarray:
    """Map a (h, w) image in [0,1] through the table to (3, h, w)."""
    if values.ndim != 2:
        raise dc.ShapeError(f"apply_colormap expects (h, w), got {values.shape}")
    xs = np.array([a[0] for a in table.anchors])
    out = np.empty((3,) + values.shape)
    for c in range(3):
        ys = np.array([a[1][c] for a in table.anchors])
        out[c] = np.interp(values, xs, ys)
    return out


# Identity map: output equals the grayscale input on every channel.
GRAY_TABLE = ColormapTable([(0.0, (0.0, 0.0, 0.0)), (1.0, (1.0, 1.0, 1.0))])

# Black-body heat ramp (black -> red -> orange -> yellow -> white),
# monotone in every channel.
HEAT_TABLE = ColormapTable([
    (0.0, (0.0, 0.0, 0.0)),
    (0.14, (0.35, 0.0, 0.0)),
    (0.29, (0.7, 0.02, 0.0)),
    (0.43, (0.95, 0.18, 0.0)),
    (0.57, (1.0, 0.45, 0.0)),
    (0.71, (1.0, 0.72, 0.05)),
    (0.86, (1.0, 0.9, 0.35)),
    (1.0, (1.0, 1.0, 1.0)),
])
