"""Reverse-mode automatic differentiation over numpy arrays.

Every operation appends one record to the active tape (a Wengert list).
``backward`` walks the list once in reverse; there is no recursion, so
sequence length never hits the Python stack limit.
"""

from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_TLS = threading.local()


class TapeError(RuntimeError):
    pass


def _tape_stack() -> list:
    # one stack per thread so batch items may run forward/backward in parallel
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable-by-convention array node. ``data`` must never be reassigned
    between forward and backward or the recorded caches go stale."""

    __slots__ = ("data", "_tape", "_tid")

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data)
        self._tape: Tape | None = None
        self._tid: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf. Gradients accumulate additively into ``grad`` until
    ``zero_grad`` is called; ``backward`` never overwrites."""

    __slots__ = ("name", "grad", "decay", "trainable")

    def __init__(self, name: str, data: np.ndarray, decay: bool = True):
        super().__init__(np.array(data))
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.decay = decay
        self.trainable = True

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def constant(value, dtype=None) -> Tensor:
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


class Tape:
    """Records ops during forward; replays them reversed for gradients."""

    def __init__(self):
        # each record: (output tensor, input tensors, backward fn)
        # backward fn maps d(loss)/d(output) -> list of input grads (None
        # entries mean "no gradient flows to this input").
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        out._tape = self
        out._tid = len(self._ops)
        self._ops.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, into: dict[str, np.ndarray] | None = None) -> None:
        """Accumulate d(loss)/d(param) for every reachable Parameter.

        Gradients go into ``Parameter.grad`` by default, or into the ``into``
        dict (keyed by parameter name) so callers can reduce per-item grads in
        a fixed order regardless of worker count. Raises TapeError if ``loss``
        was not produced on this tape (backward before forward, or forward ran
        under a different/no tape).
        """
        if loss._tape is not self:
            raise TapeError(
                "backward target was not recorded on this tape; "
                "run the forward pass inside `with Tape() as tape:` first"
            )
        if loss.data.ndim != 0:
            raise TapeError(f"backward target must be scalar, got shape {loss.data.shape}")

        partial: dict[int, np.ndarray] = {loss._tid: np.ones((), dtype=loss.data.dtype)}
        for out, inputs, backward_fn in reversed(self._ops):
            g_out = partial.pop(out._tid, None)
            if g_out is None:
                continue  # dead branch: nothing downstream consumed this op
            for tensor, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None:
                    continue
                if isinstance(tensor, Parameter):
                    if not tensor.trainable:
                        continue
                    if into is None:
                        tensor.grad += g_in
                    elif tensor.name in into:
                        into[tensor.name] += g_in
                    else:
                        into[tensor.name] = np.array(g_in, dtype=tensor.grad.dtype)
                elif tensor._tape is self:
                    tid = tensor._tid
                    if tid in partial:
                        partial[tid] = partial[tid] + g_in
                    else:
                        partial[tid] = g_in
                # tensors from no tape (constants) or a different tape are
                # treated as constants: gradient is dropped.


class no_grad:
    """Context manager: ops run inside record nothing (fast inference path)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


class ShapeError(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (exact inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape (..., D), w (D, H), b (H,)."""
    _check(w.data.ndim == 2, f"affine weight must be rank 2, got {w.data.shape}")
    _check(
        x.data.ndim >= 1 and x.data.shape[-1] == w.data.shape[0],
        f"affine shape mismatch: x {x.data.shape} vs w {w.data.shape}",
    )
    _check(
        b.data.shape == (w.data.shape[1],),
        f"affine bias shape {b.data.shape} does not match w {w.data.shape}",
    )
    out_data = x.data @ w.data + b.data

    def backward_fn(g):
        x2 = x.data.reshape(-1, x.data.shape[-1])     # [N, D]
        g2 = g.reshape(-1, g.shape[-1])               # [N, H]
        dx = (g2 @ w.data.T).reshape(x.data.shape)
        dw = x2.T @ g2
        db = g2.sum(axis=0)
        return dx, dw, db

    return _record(out_data, (x, w, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(
        a.data.shape == b.data.shape,
        f"add requires equal shapes, got {a.data.shape} and {b.data.shape}",
    )
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ShapeError(
            f"multiply cannot broadcast {a.data.shape} with {b.data.shape}"
        ) from err
    out_data = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out_data, (a, b), backward_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_stable(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def concat(parts: list[Tensor] | tuple[Tensor, ...], axis: int = -1) -> Tensor:
    _check(len(parts) > 0, "concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out_data, tuple(parts), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, max-shifted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(y, (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    return _record(out_data, (x,), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    c = x.data.dtype.type(factor)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)
    return _record(out_data, (x,), lambda g: (g.reshape(x.data.shape),))


def embed_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; gradient scatters back with np.add.at."""
    ids = np.asarray(ids)
    _check(table.data.ndim == 2, f"embedding table must be rank 2, got {table.data.shape}")
    _check(ids.size == 0 or (ids.min() >= 0 and ids.max() < table.data.shape[0]),
           "embedding id out of range")
    out_data = table.data[ids]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record(out_data, (table,), backward_fn)


def take_row(x: Tensor, index: int) -> Tensor:
    """x[index] along the first axis; gradient scatters into that row."""
    _check(0 <= index < x.data.shape[0],
           f"row {index} out of range for shape {x.data.shape}")
    out_data = x.data[index]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return _record(out_data, (x,), backward_fn)


def take_along_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick x[..., ids[...]] elementwise along the last axis (for CE losses)."""
    ids = np.asarray(ids)
    _check(ids.shape == x.data.shape[:-1],
           f"index shape {ids.shape} must match leading dims of {x.data.shape}")
    picked = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, ids[..., None], g[..., None], axis=-1)
        return (dx,)

    return _record(picked, (x,), backward_fn)


def gather_rows_batch(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-item row permutation: out[b, t] = x[b, index[b, t]].

    ``index`` must cover axis 1 as a permutation for every batch item so the
    scatter in the backward pass cannot collide.
    """
    index = np.asarray(index)
    _check(index.ndim == 2 and x.data.ndim >= 2
           and index.shape == x.data.shape[:2],
           f"index shape {index.shape} must match leading dims of {x.data.shape}")
    rows = np.arange(index.shape[1])
    _check(bool((np.sort(index, axis=1) == rows[None, :]).all()),
           "index rows must each be a permutation of the time axis")
    batch = np.arange(index.shape[0])[:, None]
    out_data = x.data[batch, index]

    def backward_fn(g):
        dx = np.empty_like(x.data)
        dx[batch, index] = g
        return (dx,)

    return _record(out_data, (x,), backward_fn)


def slice_rows(x: Tensor, item: int, length: int) -> Tensor:
    """x[item, :length] from a padded batch; gradient scatters into the slice."""
    _check(0 <= item < x.data.shape[0],
           f"item {item} out of range for shape {x.data.shape}")
    _check(0 < length <= x.data.shape[1],
           f"length {length} out of range for shape {x.data.shape}")
    out_data = x.data[item, :length]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[item, :length] = g
        return (dx,)

    return _record(out_data, (x,), backward_fn)


_PRIMITIVES = {
    "affine": affine,
    "add": add,
    "elementwise-multiply": multiply,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "concatenate": concat,
    "log-softmax": log_softmax,
    "sum": tensor_sum,
    "scale": scale,
    "reshape": reshape,
    "embed-rows": embed_rows,
    "take-along-last": take_along_last,
    "gather-rows-batch": gather_rows_batch,
    "slice-rows": slice_rows,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by kind string (also records on the active tape)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}; known: {sorted(_PRIMITIVES)}")
    if kind == "concatenate":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation for ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise TapeError("backward before forward: tensor was not recorded on any tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# initialization and gradient checking
# ---------------------------------------------------------------------------

def init_uniform(name: str, shape: tuple[int, ...], fan_in: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                 decay: bool = True) -> Parameter:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], the init used everywhere."""
    limit = 1.0 / np.sqrt(float(fan_in))
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Parameter(name, data, decay=decay)


def zeros_param(name: str, shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Parameter:
    return Parameter(name, np.zeros(shape, dtype=dtype), decay=False)


def finite_difference_check(fn, params: list[Parameter], epsilon: float = 1e-5,
                            atol: float = 0.0) -> float:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    Returns the max relative error |analytic - numeric| / max(|a|, |n|, 1e-12)
    over every coordinate of every parameter. Differences at or below ``atol``
    count as zero: central differences carry roundoff noise near
    machine_eps * |f| / epsilon, which dominates the relative measure on
    coordinates whose true gradient is tiny. ``fn`` must be deterministic; two
    baseline evaluations that differ bitwise are rejected. Run with float64
    parameters for meaningful tolerances.
    """
    with no_grad():
        base1 = float(fn().data)
        base2 = float(fn().data)
    if base1 != base2:
        raise TapeError("finite_difference_check requires a deterministic fn; "
                        f"two evaluations gave {base1!r} and {base2!r}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            with no_grad():
                up = float(fn().data)
            flat[i] = keep - epsilon
            with no_grad():
                down = float(fn().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * epsilon)
            a_i = float(a.reshape(-1)[i])
            diff = abs(a_i - numeric)
            if diff <= atol:
                continue
            worst = max(worst, diff / max(abs(a_i), abs(numeric), 1e-12))
    return worst
