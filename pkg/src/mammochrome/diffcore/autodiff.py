"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: operators applied to ``Var`` nodes record themselves on the
tape that owns their inputs; ``Tape.backward`` replays the records in reverse
order exactly once. The operator set is deliberately small: what a compact
encoder-decoder, a strided conv backbone and an MLP head need, nothing more.

All arrays are C-contiguous float64. Convolutions use NCHW layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operator input shapes are incompatible; message names the operator."""


class TapeConsumedError(RuntimeError):
    """A tape was asked to run backward twice."""


def _as_f64(x) -> np.ndarray:
    # ascontiguousarray would promote 0-d to 1-d; keep scalars 0-d.
    a = np.asarray(x, dtype=np.float64)
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


class Var:
    """A tape node: a value plus the gradient slot filled by backward."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: "Tape | None"):
        self.value = _as_f64(value)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Recorded operations for one forward pass.

    ``backward`` may be called once; the tape is consumed afterwards so a
    stale tape cannot silently produce gradients from freed intermediates.
    """

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], object]] = []
        self._consumed = False

    def var(self, value) -> Var:
        return Var(value, self)

    def _record(self, out: Var, inputs: tuple[Var, ...], backward_fn) -> None:
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Var, seed_grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``loss`` into every upstream Var.

        Visits records in reverse insertion order, which is a reverse
        topological order for any graph built by running forward once.
        """
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a previous backward")
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        self._consumed = True
        if seed_grad is None:
            seed_grad = np.ones_like(loss.value)
        loss.grad = _as_f64(seed_grad)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            input_grads = backward_fn(out.grad)
            for v, g in zip(inputs, input_grads):
                if g is None:
                    continue
                if v.grad is None:
                    v.grad = np.zeros_like(v.value)
                v.grad += g
        self._records.clear()

    def release(self) -> None:
        """Drop the recorded graph without running backward.

        A forward-only tape (scoring, encoding) otherwise keeps its
        intermediates alive through Var <-> record reference cycles until a
        cycle collection happens to run; releasing makes them reclaimable by
        reference counting alone. The tape counts as consumed afterwards.
        """
        self._records.clear()
        self._consumed = True


def _tape_of(*vars_: Var) -> Tape:
    tapes = {v.tape for v in vars_ if isinstance(v, Var) and v.tape is not None}
    if len(tapes) != 1:
        raise ValueError("operands must share exactly one tape")
    return tapes.pop()


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return Var(_as_f64(x), tape)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value, tape)
    tape._record(out, (a, b), lambda g: (g, g))
    return out


def scale(a: Var, c: float) -> Var:
    tape = _tape_of(a)
    c = float(c)
    out = Var(a.value * c, tape)
    tape._record(out, (a,), lambda g: (g * c,))
    return out


def relu(x: Var) -> Var:
    tape = _tape_of(x)
    mask = x.value > 0.0
    out = Var(np.where(mask, x.value, 0.0), tape)
    tape._record(out, (x,), lambda g: (np.where(mask, g, 0.0),))
    return out


def sigmoid(x: Var) -> Var:
    tape = _tape_of(x)
    s = _sigmoid(x.value)
    out = Var(s, tape)
    tape._record(out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    pos = z >= 0
    out = np.empty_like(z)
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_size, pad_lo, pad_hi) for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            return 0, 0, 0
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Var, w: Var, b: Var, stride: int = 1, padding: str = "same") -> Var:
    """2-D convolution (cross-correlation), NCHW input, OIHW weight.

    Forward im2col feeds one dgemm; backward reuses the saved column matrix
    for the weight gradient and scatter-adds kernel-offset slices for the
    input gradient.
    """
    tape = _tape_of(x, w, b)
    x, w, b = _lift(x, tape), _lift(w, tape), _lift(b, tape)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.value.shape} and {w.value.shape}")
    n, cin, h, wid = x.value.shape
    cout, cin_w, kh, kw = w.value.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight in-channels {cin_w}")
    if b.value.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.value.shape} != ({cout},)")
    ho, ph_lo, ph_hi = _conv_geometry(h, kh, stride, padding)
    wo, pw_lo, pw_hi = _conv_geometry(wid, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {h}x{wid} too small for {kh}x{kw} kernel with padding={padding!r}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph_lo, ph_hi), (pw_lo, pw_hi)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, cin, ho, wo, kh, kw) -> (n*ho*wo, cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.value.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T + b.value
    out = Var(np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)), tape)

    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g: np.ndarray):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        dw = (g2.T @ cols).reshape(cout, cin, kh, kw)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros((n, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph_lo : hp - ph_hi, pw_lo : wp - pw_hi]
        return np.ascontiguousarray(dx), dw, db

    tape._record(out, (x, w, b), backward)
    return out


def max_pool2(x: Var) -> Var:
    """2x2 max pooling, stride 2. Ties route the gradient to the first max."""
    tape = _tape_of(x)
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    v = x.value.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = Var(np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], tape)

    def backward(g: np.ndarray):
        dv = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(dv, idx[..., None], g[..., None], axis=-1)
        dx = dv.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx),)

    tape._record(out, (x,), backward)
    return out


def upsample_nearest2(x: Var) -> Var:
    """Nearest-neighbour 2x spatial upsampling."""
    tape = _tape_of(x)
    if x.value.ndim != 4:
        raise ShapeError(f"upsample_nearest2: expected 4-d input, got {x.value.shape}")
    out = Var(x.value.repeat(2, axis=2).repeat(2, axis=3), tape)
    n, c, h, w = x.value.shape

    def backward(g: np.ndarray):
        dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (dx,)

    tape._record(out, (x,), backward)
    return out


def global_avg_pool(x: Var) -> Var:
    """Mean over the spatial axes: (n, c, h, w) -> (n, c)."""
    tape = _tape_of(x)
    if x.value.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.value.shape}")
    n, c, h, w = x.value.shape
    out = Var(x.value.mean(axis=(2, 3)), tape)

    def backward(g: np.ndarray):
        dx = np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w))
        return (np.ascontiguousarray(dx),)

    tape._record(out, (x,), backward)
    return out


def concat_channels(a: Var, b: Var) -> Var:
    """Concatenate along the channel axis (skip connections)."""
    tape = _tape_of(a, b)
    if a.value.ndim != 4 or b.value.ndim != 4:
        raise ShapeError(f"concat_channels: expected 4-d inputs, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[0] != b.value.shape[0] or a.value.shape[2:] != b.value.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.value.shape} vs {b.value.shape}")
    ca = a.value.shape[1]
    out = Var(np.concatenate([a.value, b.value], axis=1), tape)

    def backward(g: np.ndarray):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    tape._record(out, (a, b), backward)
    return out


def dense(x: Var, w: Var, b: Var) -> Var:
    """Affine map: (n, d) @ (d, k) + (k,)."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(x, tape), _lift(w, tape), _lift(b, tape)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"dense: shapes {x.value.shape} @ {w.value.shape}")
    if b.value.shape != (w.value.shape[1],):
        raise ShapeError(f"dense: bias shape {b.value.shape} != ({w.value.shape[1]},)")
    out = Var(x.value @ w.value + b.value, tape)

    def backward(g: np.ndarray):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    tape._record(out, (x, w, b), backward)
    return out


def bce_with_logits(logits: Var, targets: np.ndarray) -> Var:
    """Mean binary cross-entropy on raw logits; numerically stable.

    loss_i = max(z, 0) - z*y + log(1 + exp(-|z|)), averaged over the batch.
    """
    tape = _tape_of(logits)
    z = logits.value.reshape(-1)
    y = _as_f64(targets).reshape(-1)
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: {logits.value.shape} logits vs {np.shape(targets)} targets")
    n = z.shape[0]
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Var(np.float64(per.mean()), tape)

    def backward(g: np.ndarray):
        dz = (_sigmoid(z) - y) * (float(g) / n)
        return (dz.reshape(logits.value.shape),)

    tape._record(out, (logits,), backward)
    return out
