"""Dense tensors with taped reverse-mode gradients.

Everything is backed by numpy arrays. Differentiable ops record a node on
the active ``Tape``; ``backward`` replays the tape in reverse and
accumulates gradients into ``Tensor.grad``. Ops executed outside any tape
run untracked, which keeps inference and finite-difference probes cheap.

Float width is carried by the arrays themselves: build parameters as
float32 for training or float64 for gradient checking and the whole graph
follows.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward()."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A numpy array plus an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None) -> None:
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{flag})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division only supports a plain scalar divisor")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: "Tensor | None" = None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _make(values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        tape.nodes.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values + b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(out_values, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values - b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make(out_values, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_values = a.values * b.values

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(out_values, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on the leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul expects operands with ndim >= 2, got {a.values.shape} @ {b.values.shape}"
        )
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.values.shape} @ {b.values.shape}"
        )
    out_values = np.matmul(a.values, b.values)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.values.shape))

    return _make(out_values, (a, b), backward_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.exp(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * out_values)

    return _make(out_values, (a,), backward_fn)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.log(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g / a.values)

    return _make(out_values, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.tanh(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * (1.0 - out_values * out_values))

    return _make(out_values, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    out_values = np.empty_like(x)
    pos = x >= 0
    out_values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_values[~pos] = ex / (1.0 + ex)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * out_values * (1.0 - out_values))

    return _make(out_values, (a,), backward_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.maximum(a.values, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * (a.values > 0))

    return _make(out_values, (a,), backward_fn)


def absval(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.abs(a.values)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * np.sign(a.values))

    return _make(out_values, (a,), backward_fn)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only strictly inside the interval."""
    a = _as_tensor(a)
    out_values = np.clip(a.values, lo, hi)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g * ((a.values > lo) & (a.values < hi)))

    return _make(out_values, (a,), backward_fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.values.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.values.shape).copy())

    return _make(out_values, (a,), backward_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.values.shape[axis]

    def backward_fn(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.values.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.values.shape).copy())

    return _make(out_values, (a,), backward_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out_values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]

    def backward_fn(g: np.ndarray) -> None:
        offset = 0
        for p, size in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(p, g[tuple(index)])
            offset += size

    return _make(out_values, parts, backward_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out_values = a.values[index].copy()

    def backward_fn(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        full = np.zeros_like(a.values)
        full[index] = g
        _accumulate(a, full)

    return _make(out_values, (a,), backward_fn)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.values.shape))

    return _make(out_values, (a,), backward_fn)


def transpose(a, axis0: int, axis1: int) -> Tensor:
    a = _as_tensor(a)
    out_values = np.swapaxes(a.values, axis0, axis1)

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(a, np.swapaxes(g, axis0, axis1))

    return _make(out_values, (a,), backward_fn)


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where mask is True.

    Masked positions get exactly zero weight. A row with no admissible
    positions comes out all zeros rather than NaN.
    """
    a = _as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.values.shape)
    neg = np.where(mask, a.values, -np.inf)
    peak = neg.max(axis=-1, keepdims=True)
    # rows that are fully masked would otherwise propagate -inf
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(neg - peak)
    e = np.where(mask, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    out_values = e / safe

    def backward_fn(g: np.ndarray) -> None:
        inner = (g * out_values).sum(axis=-1, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return _make(out_values, (a,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_values = xhat * gain.values + bias.values

    def backward_fn(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.values.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.values.shape))
        if x.requires_grad:
            gx = g * gain.values
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - mean_gx - xhat * mean_gx_xhat))

    return _make(out_values, (x, gain, bias), backward_fn)


def embedding_lookup(table, indices) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out_values = table.values[idx]

    def backward_fn(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _make(out_values, (table,), backward_fn)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be below 1")
    keep = (rng.random(x.values.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.values.dtype)
    out_values = x.values * keep

    def backward_fn(g: np.ndarray) -> None:
        _accumulate(x, g * keep)

    return _make(out_values, (x,), backward_fn)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Seed the loss gradient with 1 and replay the tape in reverse."""
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward needs an active or explicit Tape")
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    loss.grad = np.ones_like(loss.values)
    for out, backward_fn in reversed(tape.nodes):
        if out.grad is not None:
            backward_fn(out.grad)


class ParameterStore:
    """Named trainable tensors plus their Adam state, in insertion order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(values), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return float(np.sqrt(total))


def adam_step(
    store: ParameterStore,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = 1.0,
) -> float:
    """One Adam update over every parameter in the store.

    The global gradient norm is computed over all parameters jointly and,
    when it exceeds clip_norm, every gradient is scaled down by the same
    factor before the moment updates. Gradients are cleared afterwards.
    Returns the pre-clip global norm.
    """
    norm = store.grad_norm()
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        elif scale != 1.0:
            g = g * scale
        m = store.adam_m.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            store.adam_v[name] = np.zeros_like(p.values)
        v = store.adam_v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        store.adam_m[name] = m
        store.adam_v[name] = v
        p.values -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    store.zero_grad()
    return norm


def grad_check(
    fn: Callable[[], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
) -> tuple[float, str]:
    """Compare taped gradients of fn() against central finite differences.

    fn must map the current store contents to a scalar Tensor and be
    deterministic. Returns (max relative error, name of the worst
    parameter). Use float64 parameters; float32 drowns the comparison in
    rounding noise.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = fn()
        backward(loss, tape)
    worst = 0.0
    worst_name = ""
    for name, p in store.items():
        flat = p.values.reshape(-1)
        analytic = (
            p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size, dtype=flat.dtype)
        )
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(fn().values)
            flat[i] = saved - eps
            f_minus = float(fn().values)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1e-6, abs(analytic[i]), abs(numeric))
            if err > worst:
                worst = err
                worst_name = f"{name}[{i}]"
    store.zero_grad()
    return worst, worst_name


CHECKPOINT_MAGIC = b"OCVTCK1"
_META_INT, _META_REAL, _META_STR = 0, 1, 2


def save_checkpoint(
    path,
    store: ParameterStore,
    meta: dict | None = None,
    include_optimizer: bool = False,
) -> None:
    """Write parameters (and optionally Adam state) in the OCVTCK1 layout.

    Little-endian throughout: magic, format version, a small typed
    metadata block, then one record per parameter holding its name, shape
    and float32 payload. Optimizer moments follow behind a presence flag.
    """
    meta = meta or {}
    chunks: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", 1)]
    chunks.append(struct.pack("<I", len(meta)))
    for key, value in meta.items():
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<I", len(kb)) + kb)
        if isinstance(value, bool):
            raise TypeError(f"checkpoint meta value for {key!r} must be int, float or str")
        if isinstance(value, int):
            chunks.append(struct.pack("<Bq", _META_INT, value))
        elif isinstance(value, float):
            chunks.append(struct.pack("<Bd", _META_REAL, value))
        elif isinstance(value, str):
            vb = value.encode("utf-8")
            chunks.append(struct.pack("<BI", _META_STR, len(vb)) + vb)
        else:
            raise TypeError(f"checkpoint meta value for {key!r} must be int, float or str")
    chunks.append(struct.pack("<I", len(store)))
    for name, p in store.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.values, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    if include_optimizer:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<Q", store.step_count))
        for name, p in store.items():
            m = store.adam_m.get(name, np.zeros_like(p.values))
            v = store.adam_v.get(name, np.zeros_like(p.values))
            chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    else:
        chunks.append(struct.pack("<B", 0))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("checkpoint file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    """Read an OCVTCK1 file back into a fresh store. Inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta: dict = {}
    (n_meta,) = r.unpack("<I")
    for _ in range(n_meta):
        (klen,) = r.unpack("<I")
        key = r.take(klen).decode("utf-8")
        (tag,) = r.unpack("<B")
        if tag == _META_INT:
            (meta[key],) = r.unpack("<q")
        elif tag == _META_REAL:
            (meta[key],) = r.unpack("<d")
        elif tag == _META_STR:
            (vlen,) = r.unpack("<I")
            meta[key] = r.take(vlen).decode("utf-8")
        else:
            raise ValueError(f"{path}: unknown meta tag {tag}")
    store = ParameterStore()
    (n_params,) = r.unpack("<I")
    for _ in range(n_params):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        store.add(name, payload.astype(np.float32))
    (opt_flag,) = r.unpack("<B")
    if opt_flag:
        (store.step_count,) = r.unpack("<Q")
        for name, p in store.items():
            count = p.values.size
            m = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(p.values.shape)
            v = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(p.values.shape)
            store.adam_m[name] = m.astype(np.float32)
            store.adam_v[name] = v.astype(np.float32)
    if r.pos != len(r.data):
        raise ValueError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return store, meta
