"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything is row-major, 64-bit, and copied rather than viewed. Ops record
onto the innermost active ``Tape``; ``backward`` replays the records in
reverse and accumulates into ``.grad`` of every ``requires_grad`` leaf.
Attention, rotary rotation and rms normalization are fused primitives (one
tape record each) because the training loop is dominated by per-op Python
overhead at desk scale.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class DegenerateMaskError(ValueError):
    """A softmax row was masked everywhere; the attention layout is broken."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one computation.

    Records are appended in execution order, so every input of a record was
    produced earlier; replaying adjoints in reverse order therefore reaches
    every leaf.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False


class no_grad:
    """Disable taping inside the block; forward values only."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_adj")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None
        self._adj = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable):
    """Build an op output; record it if a tape is active and grads can flow."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    out._adj = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(inputs), backward_fn))
    else:
        out.requires_grad = False
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` for every requires_grad leaf.

    Grads add up across calls until explicitly zeroed. Leaves not on the
    computation path keep their existing (zero) grad.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    tape = root._tape
    if tape is None:
        raise ValueError("backward root was not produced by taped primitives")
    root._adj = np.ones_like(root.data)
    touched = [root]
    for out, inputs, fn in reversed(tape.records):
        adj = out._adj
        if adj is None:
            continue
        out._adj = None
        grads = fn(adj)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._adj is None:
                inp._adj = g
                touched.append(inp)
            else:
                # out-of-place: the first assignment may share a buffer
                inp._adj = inp._adj + g
    for t in touched:
        if t._adj is not None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += t._adj
            t._adj = None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def back(g):
        return g, g

    return _wrap(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, g * ad

    return _wrap(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)

    return _wrap(a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner-dim mismatch: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _wrap(ad @ bd, (a, b), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def back(g):
        return (np.full(shape, float(g)),)

    return _wrap(np.asarray(a.data.sum()), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    if len(parts) == 1:
        p = parts[0]

        def back1(g):
            return (g,)

        return _wrap(p.data.copy(), (p,), back1)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def slice2d(x: Tensor, rows: slice, cols: slice) -> Tensor:
    """Slice (copy) of a 2-d tensor; gradients scatter back into place."""
    if x.data.ndim != 2:
        raise ValueError(f"slice2d needs a 2-d tensor, got shape {x.data.shape}")
    shape = x.data.shape

    def back(g):
        z = np.zeros(shape)
        z[rows, cols] = g
        return (z,)

    return _wrap(x.data[rows, cols].copy(), (x,), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return slice2d(x, slice(start, stop), slice(None))


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding ids must be a flat sequence")
    n_rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ValueError(f"embedding id out of range [0, {n_rows})")
    shape = table.data.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _wrap(table.data[idx], (table,), back)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise rms normalization with a learned gain over the last axis."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,):
        raise ValueError(f"rms_norm gain shape {gain.data.shape} does not match width {d}")
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    gd = gain.data

    def back(g):
        gy = g * gd
        dx = inv * gy - xd * (inv ** 3) * ((xd * gy).mean(axis=-1, keepdims=True))
        dgain = (g * xd * inv).reshape(-1, d).sum(axis=0)
        return dx, dgain

    return _wrap(xd * inv * gd, (x, gain), back)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def back(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _wrap(xd * sig, (x,), back)


def _softmax2d(x: np.ndarray) -> np.ndarray:
    """Shift-invariant row softmax; -inf entries become exact zeros."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows needs a 2-d tensor, got shape {x.data.shape}")
    if np.isneginf(x.data).all(axis=1).any():
        raise DegenerateMaskError("softmax row is -inf everywhere (fully masked row)")
    p = _softmax2d(x.data)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _wrap(p, (x,), back)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target]."""
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy logits must be 2-d, got shape {ld.shape}")
    t, v = ld.shape
    tg = np.asarray(targets, dtype=np.int64)
    mk = np.asarray(mask, dtype=bool)
    if tg.shape != (t,) or mk.shape != (t,):
        raise ValueError("targets/mask length does not match logit rows")
    if tg.size and (tg.min() < 0 or tg.max() >= v):
        raise ValueError(f"target id out of vocabulary range [0, {v})")
    n = int(mk.sum())
    if n == 0:
        raise ValueError("empty loss: mask selects no positions")
    p = _softmax2d(ld)
    rows = np.arange(t)
    nll = -np.log(p[rows, tg])
    loss = np.asarray((nll * mk).sum() / n)

    def back(g):
        d = p.copy()
        d[rows, tg] -= 1.0
        d *= (mk / n * float(g))[:, None]
        return (d,)

    return _wrap(loss, (logits,), back)


_POS_TABLES: dict = {}


def rope_tables(positions, d_head: int, base: float = 10000.0):
    """cos/sin tables for rotary rotation at the given absolute positions.

    Nonnegative integer positions are served from a grow-on-demand master
    table so repeated windows pay no trigonometry.
    """
    if d_head % 2 != 0:
        raise ValueError("rotary rotation needs an even head width")
    half = d_head // 2
    pos = np.asarray(positions)
    if np.issubdtype(pos.dtype, np.integer) and pos.size and pos.min() >= 0:
        key = (d_head, float(base))
        entry = _POS_TABLES.get(key)
        needed = int(pos.max()) + 1
        if entry is None or entry[0].shape[0] < needed:
            size = max(512, 1 << int(needed - 1).bit_length())
            inv = base ** (-np.arange(half, dtype=np.float64) / half)
            ang = np.outer(np.arange(size, dtype=np.float64), inv)
            entry = (np.cos(ang), np.sin(ang))
            _POS_TABLES[key] = entry
        return entry[0][pos], entry[1][pos]
    posf = pos.astype(np.float64)
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.outer(posf, inv)
    return np.cos(ang), np.sin(ang)


def rope_spread(cos: np.ndarray, sin: np.ndarray, d_model: int):
    """Tile half-width tables across head blocks once, for reuse by rope()."""
    half = cos.shape[1]
    n_heads = d_model // (2 * half)
    cos_full = np.tile(np.concatenate([cos, cos], axis=1), (1, n_heads))
    sin_signed = np.tile(np.concatenate([-sin, sin], axis=1), (1, n_heads))
    return cos_full, sin_signed


_ROPE_SWAP: dict = {}


def _rope_swap(d: int, d_head: int) -> np.ndarray:
    key = (d, d_head)
    swap = _ROPE_SWAP.get(key)
    if swap is None:
        half = d_head // 2
        idx = np.arange(d).reshape(d // d_head, d_head)
        swap = np.concatenate([idx[:, half:], idx[:, :half]], axis=1).reshape(-1)
        _ROPE_SWAP[key] = swap
    return swap


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray, d_head: int | None = None) -> Tensor:
    """Apply per-head rotary rotation; head blocks are contiguous columns.

    cos/sin are either half-width (rows, d_head/2) tables, or full-width
    (cos, signed sin) pairs from rope_spread, in which case d_head must be
    given. The rotation pairs the first and second half of each head block
    and runs as one permuted multiply-add.
    """
    xd = x.data
    t, d = xd.shape
    if cos.shape[1] == d and d_head is not None:
        cos_full, sin_signed = cos, sin
    else:
        d_head = 2 * cos.shape[1]
        if d % d_head != 0:
            raise ValueError(f"width {d} is not a multiple of head width {d_head}")
        cos_full, sin_signed = rope_spread(cos, sin, d)
    swap = _rope_swap(d, d_head)
    out = xd * cos_full + xd[:, swap] * sin_signed

    def back(g):
        return (g * cos_full + (g * sin_signed)[:, swap],)

    return _wrap(out, (x,), back)


def mha(q: Tensor, k: Tensor, v: Tensor, mask_add: np.ndarray, n_heads: int,
        attn_sink: list | None = None) -> Tensor:
    """Masked multi-head attention in a single tape record.

    mask_add is (queries, keys) with 0 for allowed and -inf for blocked
    entries; it is a constant, not a differentiable input. attn_sink, when
    given, receives a detached copy of the (heads, queries, keys) softmax.
    """
    tq, d = q.data.shape
    tk = k.data.shape[0]
    if k.data.shape[1] != d or v.data.shape != (tk, d):
        raise ValueError(f"mha shape mismatch: q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    if mask_add.shape != (tq, tk):
        raise ValueError(f"mha mask shape {mask_add.shape} != ({tq}, {tk})")
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    if np.isneginf(mask_add).all(axis=1).any():
        raise DegenerateMaskError("attention mask blocks every key for some query")
    dh = d // n_heads
    isc = 1.0 / np.sqrt(dh)
    # contiguous (heads, rows, dh) blocks so the per-head products hit blas
    qh = np.ascontiguousarray(q.data.reshape(tq, n_heads, dh).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.data.reshape(tk, n_heads, dh).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.data.reshape(tk, n_heads, dh).transpose(1, 0, 2))
    scores = qh @ kh.transpose(0, 2, 1) * isc + mask_add[None, :, :]
    p = _softmax2d(scores.reshape(-1, tk)).reshape(n_heads, tq, tk)
    if attn_sink is not None:
        attn_sink.append(p.copy())
    out = (p @ vh).transpose(1, 0, 2).reshape(tq, d)

    def back(g):
        gh = np.ascontiguousarray(g.reshape(tq, n_heads, dh).transpose(1, 0, 2))
        dv = p.transpose(0, 2, 1) @ gh
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = ds @ kh * isc
        dk = ds.transpose(0, 2, 1) @ qh * isc
        return (
            dq.transpose(1, 0, 2).reshape(tq, d),
            dk.transpose(1, 0, 2).reshape(tk, d),
            dv.transpose(1, 0, 2).reshape(tk, d),
        )

    return _wrap(out, (q, k, v), back)


def finite_difference_grad(f: Callable[[Tensor], float | Tensor], x: Tensor,
                           step: float) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per coordinate."""
    if step <= 0:
        raise ValueError("finite difference step must be positive")

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        probe = x.data.copy().reshape(-1)
        probe[i] = orig + step
        f_plus = evaluate(probe.reshape(x.data.shape))
        probe[i] = orig - step
        f_minus = evaluate(probe.reshape(x.data.shape))
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return Tensor(grad.reshape(x.data.shape))
