"""Dense float64 tensors with a recorded-tape reverse-mode gradient engine.

Forward passes run inside a ``Tape`` context; every operation appends its
backward closure to the active tape and ``Tape.backward`` replays them in
reverse creation order (which is a valid topological order). Outside any
tape the same functions compute values only, which is what inference uses.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    FormatError,
    InvalidArgument,
    NonFiniteValues,
    StateError,
    TrainingDiverged,
)

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("value", "grad", "no_grad", "_backward", "_tape")

    def __init__(self, value, no_grad: bool = False):
        v = np.asarray(value, dtype=np.float64)
        # Cheap screen: any inf/nan entry forces a non-finite sum. A finite
        # sum can still overflow, so only the full check may reject.
        if not math.isfinite(float(v.sum())) and not np.all(np.isfinite(v)):
            raise NonFiniteValues("tensor holds non-finite values")
        self.value = v
        self.grad = None
        self.no_grad = no_grad
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def const(value) -> Tensor:
    """Leaf that never accumulates gradient (inputs, masks, targets)."""
    return Tensor(value, no_grad=True)


class Tape:
    """Records one forward pass and replays it backwards for gradients.

    Parameter (leaf) gradients accumulate across backward calls until
    explicitly zeroed; gradients of recorded intermediates are reset at
    the start of every backward so repeated calls stay correct.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        if not self._nodes:
            raise StateError("backward called before any forward op was recorded")
        if loss.value.size != 1:
            raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise StateError("loss tensor was not produced under this tape")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is not None:
                node._backward(node.grad)


def _record(value: np.ndarray, backward) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None:
        out._backward = backward
        out._tape = tape
        tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if t.no_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += _unbroadcast(g, t.value.shape)


# ---------------------------------------------------------------- operations


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(a.value + b.value, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(a.value - b.value, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _record(a.value * b.value, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _record(a.value * s, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(B,i)@(i,j) or (i,)@(i,j); b must be 2-D."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise InvalidArgument(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        if av.ndim == 1:
            _accum(a, g @ bv.T)
            _accum(b, np.outer(av, g))
        else:
            _accum(a, g @ bv.T)
            _accum(b, av.T @ g)

    return _record(av @ bv, backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _record(y, backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def backward(g):
        _accum(x, g * (1.0 - y * y))

    return _record(y, backward)


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.value)

    def backward(g):
        _accum(x, g * expit(x.value))

    return _record(y, backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.value)

    def backward(g):
        _accum(x, g / x.value)

    return _record(y, backward)  # _record rejects log of non-positive input


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.value)

    def backward(g):
        _accum(x, g * 0.5 / y)

    return _record(y, backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, g * 2.0 * x.value)

    return _record(x.value * x.value, backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = x.value.shape

    def backward(g):
        _accum(x, np.broadcast_to(g, shape))

    return _record(np.sum(x.value), backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise InvalidArgument("concat of zero tensors")
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _record(np.concatenate([p.value for p in parts], axis=axis), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""

    def backward(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        _accum(x, full)

    return _record(x.value[..., start:stop], backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.value.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _record(x.value.reshape(shape), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup; gradient scatters back only into the referenced rows."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise InvalidArgument("gather_rows expects a 1-D id array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise InvalidArgument("gather_rows id out of range")

    def backward(g):
        if table.no_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, idx, g)

    return _record(table.value[idx], backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the bounds."""
    inside = (x.value >= lo) & (x.value <= hi)

    def backward(g):
        _accum(x, g * inside)

    return _record(np.clip(x.value, lo, hi), backward)


# ------------------------------------------------------------- initializers


def init_uniform_fan(n_in: int, n_out: int, rng: np.random.Generator) -> Tensor:
    """Uniform in +-sqrt(6/(n_in+n_out)), shape (n_in, n_out)."""
    if n_in < 1 or n_out < 1:
        raise InvalidArgument("init dimensions must be positive")
    bound = np.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)))


def init_orthogonal(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """Semi-orthogonal matrix: the smaller-dimension Gram matrix is identity."""
    if rows < 1 or cols < 1:
        raise InvalidArgument("init dimensions must be positive")
    a = rng.standard_normal((rows, cols))
    if rows >= cols:
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))  # sign fix keeps the draw deterministic
        return Tensor(q)
    q, r = np.linalg.qr(a.T)
    q = q * np.sign(np.diag(r))
    return Tensor(q.T)


# ----------------------------------------------------------------- LSTM step


@dataclass
class LstmCellState:
    """Cell and hidden activations; rows are batch entries."""

    c: Tensor
    h: Tensor


def lstm_step(x: Tensor, prev: LstmCellState, w: Tensor, b: Tensor) -> LstmCellState:
    """One recurrence step: gates (i,f,o,g) from a single weight matrix
    applied to the concatenation of the input and the previous hidden state.
    """
    if w.value.ndim != 2 or w.value.shape[1] % 4 != 0:
        raise InvalidArgument("lstm weight must be (d_in+H, 4H)")
    hidden = w.value.shape[1] // 4
    d_in = w.value.shape[0] - hidden
    if x.value.shape[-1] != d_in or prev.h.value.shape[-1] != hidden:
        raise InvalidArgument(
            f"lstm shape mismatch: x {x.value.shape}, h {prev.h.value.shape}, w {w.value.shape}"
        )
    z = affine(concat([x, prev.h], axis=-1), w, b)
    i = sigmoid(slice_cols(z, 0, hidden))
    f = sigmoid(slice_cols(z, hidden, 2 * hidden))
    o = sigmoid(slice_cols(z, 2 * hidden, 3 * hidden))
    g = tanh(slice_cols(z, 3 * hidden, 4 * hidden))
    c = add(mul(f, prev.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmCellState(c=c, h=h)


def zero_state(batch: int, hidden: int) -> LstmCellState:
    z = np.zeros((batch, hidden))
    return LstmCellState(c=const(z), h=const(z.copy()))


# ------------------------------------------------------------ parameter store

_RESERVED = "::"


@dataclass
class ParamEntry:
    tensor: Tensor
    accum_g: np.ndarray  # running average of squared gradients
    accum_x: np.ndarray  # running average of squared updates


class ParameterStore:
    """Named trainable tensors plus their optimizer state.

    Iteration order is always sorted by name so updates and checkpoints
    are reproducible regardless of insertion order.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> Tensor:
        if _RESERVED in name:
            raise InvalidArgument(f"parameter name {name!r} uses a reserved substring")
        if name in self._entries:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.zero_grad()
        self._entries[name] = ParamEntry(
            tensor=t,
            accum_g=np.zeros_like(t.value),
            accum_x=np.zeros_like(t.value),
        )
        return t

    def names(self) -> list[str]:
        return sorted(self._entries)

    def entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise InvalidArgument(f"unknown parameter {name!r}") from None

    def tensor(self, name: str) -> Tensor:
        return self.entry(name).tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self):
        for e in self._entries.values():
            e.tensor.zero_grad()

    def n_values(self) -> int:
        return sum(e.tensor.value.size for e in self._entries.values())

    def snapshot(self) -> dict:
        """Deep copy of values and optimizer state, for best-epoch restore."""
        return {
            name: (e.tensor.value.copy(), e.accum_g.copy(), e.accum_x.copy())
            for name, e in self._entries.items()
        }

    def restore(self, snap: dict):
        for name, (v, ag, ax) in snap.items():
            e = self.entry(name)
            e.tensor.value[...] = v
            e.accum_g[...] = ag
            e.accum_x[...] = ax


def adadelta_update(
    store: ParameterStore,
    lr: float = 1.0,
    decay_rho: float = 0.95,
    eps: float = 1e-6,
    weight_decay_names=(),
    lam: float = 0.0,
):
    """In-place ADADELTA step over every parameter, sorted by name.

    Names listed in weight_decay_names get an extra lam*value added to
    their gradient (L2 decay) before the accumulator updates.
    """
    if not (0.0 < decay_rho < 1.0):
        raise InvalidArgument("decay_rho must lie strictly between 0 and 1")
    if eps <= 0.0:
        raise InvalidArgument("eps must be positive")
    decay = frozenset(weight_decay_names)
    for name, e in store.items():
        g = e.tensor.grad
        if g is None:
            g = np.zeros_like(e.tensor.value)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        if name in decay and lam != 0.0:
            g = g + lam * e.tensor.value
        e.accum_g *= decay_rho
        e.accum_g += (1.0 - decay_rho) * g * g
        delta = np.sqrt((e.accum_x + eps) / (e.accum_g + eps)) * g
        e.accum_x *= decay_rho
        e.accum_x += (1.0 - decay_rho) * delta * delta
        e.tensor.value -= lr * delta


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"LRMMCKPT"
CHECKPOINT_VERSION = 1
_SFX_ACCUM_G = "::accum_g"
_SFX_ACCUM_X = "::accum_x"
_SEED_NAME = "::rng_seed"


def _write_record(f, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(store: ParameterStore, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, e in store.items():
            _write_record(f, name, e.tensor.value)
            _write_record(f, name + _SFX_ACCUM_G, e.accum_g)
            _write_record(f, name + _SFX_ACCUM_X, e.accum_x)
        # 64-bit seed split into exact f64-representable halves
        seed = store.rng_seed & 0xFFFFFFFFFFFFFFFF
        halves = np.array([seed >> 32, seed & 0xFFFFFFFF], dtype=np.float64)
        _write_record(f, _SEED_NAME, halves)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"checkpoint truncated reading {what} at byte offset {f.tell() - len(buf)}"
        )
    return buf


def load_checkpoint(path) -> ParameterStore:
    records: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(
                    f"checkpoint truncated reading name length at byte offset {f.tell() - len(head)}"
                )
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = [
                struct.unpack("<I", _read_exact(f, 4, "dim"))[0] for _ in range(rank)
            ]
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(f, 8 * count, f"values of {name!r}")
            records[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)

    seed = 0
    if _SEED_NAME in records:
        hi, lo = records.pop(_SEED_NAME)
        seed = (int(hi) << 32) | int(lo)
    store = ParameterStore(rng_seed=seed)
    accum_g = {}
    accum_x = {}
    for name in list(records):
        if name.endswith(_SFX_ACCUM_G):
            accum_g[name[: -len(_SFX_ACCUM_G)]] = records.pop(name)
        elif name.endswith(_SFX_ACCUM_X):
            accum_x[name[: -len(_SFX_ACCUM_X)]] = records.pop(name)
    for name, value in records.items():
        store.add(name, value)
        e = store.entry(name)
        for cache, slot in ((accum_g, "accum_g"), (accum_x, "accum_x")):
            if name in cache:
                arr = cache[name]
                if arr.shape != value.shape:
                    raise FormatError(f"accumulator shape mismatch for {name!r}")
                setattr(e, slot, arr.astype(np.float64))
    return store
