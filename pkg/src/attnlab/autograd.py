"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`; outside a
tape they run as plain numpy and build no graph, which is what decoding uses.

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_DEFAULT_DTYPE = np.float32


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def get_default_dtype():
    return getattr(_local, "dtype", _DEFAULT_DTYPE)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors on this thread."""
    prev = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else get_default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, which is already a topological
    order; :meth:`backward` walks them in reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, loss: Tensor, grad=None) -> None:
        backward(self, loss, grad)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(tuple(inputs), out, backward_fn)
        out._node = node
        tape.nodes.append(node)
    else:
        out.requires_grad = False
    return out


def backward(tape: Tape, loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` of every leaf tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients live only
    for the duration of the sweep. Leaves that appear on the tape but do not
    influence ``loss`` end up with an all-zero gradient.
    """
    if grad is None:
        if loss.data.size != 1:
            raise DimensionError("backward needs an explicit gradient for a non-scalar output")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if loss._node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and t._node is None:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # overflow-free form
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


# shape -----------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.ascontiguousarray(y), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward.

    Multi-dimensional ``indices`` are only supported on axis 0 (embedding lookup).
    """
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1 and axis != 0:
        raise DimensionError("multi-dimensional indices need axis=0")
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if axis == 0:
            np.add.at(full, indices, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, indices, axis=axis), (x,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for k in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(data, tensors, bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _make(y, (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


# linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., k) and a matrix b of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        inputs.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, inputs, bw)


# normalisation -------------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int, mask=None) -> np.ndarray:
    z64 = z.astype(np.float64)
    if mask is not None:
        z64 = np.where(mask, z64, -np.inf)
    z64 = z64 - z64.max(axis=axis, keepdims=True)
    e = np.exp(z64)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get probability 0."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    p64 = _softmax_np(x.data, axis, mask)
    p = p64.astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gz = p64 * (g64 - (g64 * p64).sum(axis=axis, keepdims=True))
        return (gz.astype(x.dtype),)

    return _make(p, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y64 = z - lse
    p64 = np.exp(y64)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - p64 * g64.sum(axis=axis, keepdims=True)).astype(x.dtype),)

    return _make(y64.astype(x.dtype), (x,), bw)


# pooling -------------------------------------------------------------------------


def _log_selection(arg: np.ndarray) -> None:
    log = getattr(_local, "selections", None)
    if log is not None:
        log.append(arg.tobytes())


@contextlib.contextmanager
def _record_selections():
    prev = getattr(_local, "selections", None)
    log = _local.selections = []
    try:
        yield log
    finally:
        _local.selections = prev


def pooled_lengths(lengths, factor: int) -> np.ndarray:
    return -(-np.asarray(lengths, dtype=np.int64) // factor)


def max_pool_time(seq, factor: int, lengths=None) -> Tensor:
    """Non-overlapping max over windows of ``factor`` frames.

    Accepts T×d or B×T×d. With ``lengths`` (B,) frames at or beyond a
    sequence's length never win a window; pooled rows past the pooled length
    are zero. Ties route the gradient to the lowest frame index.
    """
    seq = as_tensor(seq)
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    if factor == 1 and lengths is None:
        return seq
    squeeze = seq.ndim == 2
    x = seq.data[None] if squeeze else seq.data
    B, T, d = x.shape
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    T_out = -(-T // factor)
    valid = np.arange(T_out * factor)[None, :] < lengths[:, None]
    padded = np.full((B, T_out * factor, d), -np.inf, dtype=np.float64)
    padded[:, :T] = x
    padded[~valid] = -np.inf
    windows = padded.reshape(B, T_out, factor, d)
    arg = windows.argmax(axis=2)
    _log_selection(arg)
    out = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]
    out_valid = np.arange(T_out)[None, :] < pooled_lengths(lengths, factor)[:, None]
    out[~out_valid] = 0.0
    out = out.astype(seq.dtype)
    src = arg + (np.arange(T_out) * factor)[None, :, None]

    def bw(g):
        g = g[None] if squeeze else g
        full = np.zeros((B, T_out * factor, d), dtype=seq.dtype)
        gm = np.where(out_valid[:, :, None], g, 0.0)
        bi = np.arange(B)[:, None, None]
        di = np.arange(d)[None, None, :]
        # each input frame lands in exactly one window, so no index collides
        full[bi, src, di] = gm
        full = full[:, :T]
        return (full[0] if squeeze else full,)

    return _make(out[0] if squeeze else out, (seq,), bw)


def maxout(v, group: int = 2) -> Tensor:
    """Max over consecutive groups along the last axis; ties go to the lower index."""
    v = as_tensor(v)
    n = v.shape[-1]
    if n % group:
        raise DimensionError(f"maxout width {n} not divisible by {group}")
    x = v.data.reshape(v.shape[:-1] + (n // group, group))
    arg = x.argmax(axis=-1)
    _log_selection(arg)
    y = np.take_along_axis(x, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, arg[..., None], g[..., None], axis=-1)
        return (full.reshape(v.shape),)

    return _make(y, (v,), bw)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


def attend(alpha, values) -> Tensor:
    """Context vectors ``c[b] = sum_t alpha[b, t] * values[b, t]``."""
    alpha, values = as_tensor(alpha), as_tensor(values)
    if alpha.shape != values.shape[:2]:
        raise DimensionError(f"attend shape mismatch: {alpha.shape} vs {values.shape}")
    ad, hd = alpha.data, values.data
    c = np.einsum("bt,btd->bd", ad, hd)

    def bw(g):
        ga = np.einsum("bd,btd->bt", g, hd) if alpha.requires_grad else None
        gh = ad[:, :, None] * g[:, None, :] if values.requires_grad else None
        return ga, gh

    return _make(c, (alpha, values), bw)


# recurrent -----------------------------------------------------------------------


def lstm_step(x, h_prev, c_prev, w, b):
    """One LSTM cell step from primitive ops; gate rows are ordered i, f, g, o.

    ``w`` has shape (4u, d + u) acting on ``[x, h_prev]``; no peepholes.
    """
    h_prev, c_prev = as_tensor(h_prev), as_tensor(c_prev)
    u = h_prev.shape[-1]
    if as_tensor(w).shape != (4 * u, as_tensor(x).shape[-1] + u):
        raise DimensionError(f"lstm weight {as_tensor(w).shape} does not fit input/state sizes")
    z = linear(concat([x, h_prev], axis=-1), w, b)
    i = sigmoid(z[..., 0:u])
    f = sigmoid(z[..., u:2 * u])
    g = tanh(z[..., 2 * u:3 * u])
    o = sigmoid(z[..., 3 * u:4 * u])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def _reverse_index(B: int, T: int, lengths: np.ndarray) -> np.ndarray:
    t = np.arange(T)[None, :]
    return np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)


def lstm_layer(x, w, b, lengths=None, reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over B×T×d from zero state, as a single tape node.

    Outputs at padded positions are zero. With ``reverse`` each sequence is
    read from its own last valid frame backwards.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, T, d = x.shape
    u = w.shape[0] // 4
    if w.shape != (4 * u, d + u) or b.shape != (4 * u,):
        raise DimensionError(f"lstm weight {w.shape} / bias {b.shape} do not fit input width {d}")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(x.dtype)[:, :, None]
    bi = np.arange(B)[:, None]
    rev = _reverse_index(B, T, lengths) if reverse else None
    xs = x.data[bi, rev] if reverse else x.data
    wd = w.data
    wx, wh = wd[:, :d], wd[:, d:]
    pre = xs @ wx.T + b.data
    dt = np.result_type(x.dtype, w.dtype)
    hs = np.zeros((T + 1, B, u), dtype=dt)
    cs = np.zeros((T + 1, B, u), dtype=dt)
    gates = np.empty((T, B, 4 * u), dtype=dt)
    tcs = np.empty((T, B, u), dtype=dt)
    for t in range(T):
        z = pre[:, t] + hs[t] @ wh.T
        a = gates[t]
        a[:, :2 * u] = _sigmoid(z[:, :2 * u])
        a[:, 2 * u:3 * u] = np.tanh(z[:, 2 * u:3 * u])
        a[:, 3 * u:] = _sigmoid(z[:, 3 * u:])
        cs[t + 1] = a[:, u:2 * u] * cs[t] + a[:, :u] * a[:, 2 * u:3 * u]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[:, 3 * u:] * tcs[t]
    out = np.transpose(hs[1:], (1, 0, 2))
    if reverse:
        out = out[bi, rev]
    out = np.ascontiguousarray(out * mask)

    def bw(g):
        g = g * mask
        if reverse:
            g = g[bi, rev]
        g = np.transpose(g, (1, 0, 2))
        dpre = np.empty((T, B, 4 * u), dtype=dt)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((B, u), dtype=dt)
        dc_next = np.zeros((B, u), dtype=dt)
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
            dh = g[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tcs[t] * tcs[t])
            dz = dpre[t]
            dz[:, :u] = dc * gg * i * (1.0 - i)
            dz[:, u:2 * u] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * u:3 * u] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * u:] = dh * tcs[t] * o * (1.0 - o)
            dwh += dz.T @ hs[t]
            dh_next = dz @ wh
            dc_next = dc * f
        dpre_b = np.transpose(dpre, (1, 0, 2))
        flat = dpre_b.reshape(-1, 4 * u)
        dwx = flat.T @ xs.reshape(-1, d)
        dx = dpre_b @ wx
        if reverse:
            dx = dx[bi, rev]
        return dx, np.concatenate([dwx, dwh], axis=1), flat.sum(axis=0)

    return _make(out, (x, w, b), bw)


def bilstm_layer(seq, w_fwd, b_fwd, w_bwd, b_bwd, lengths=None) -> Tensor:
    """Bidirectional LSTM; per-frame outputs are ``[forward, backward]``."""
    squeeze = as_tensor(seq).ndim == 2
    x = reshape(seq, (1,) + as_tensor(seq).shape) if squeeze else seq
    fwd = lstm_layer(x, w_fwd, b_fwd, lengths)
    bwd = lstm_layer(x, w_bwd, b_bwd, lengths, reverse=True)
    out = concat([fwd, bwd], axis=-1)
    return out[0] if squeeze else out


# checking ------------------------------------------------------------------------


class GradCheckReport:
    def __init__(self):
        self.max_error = 0.0
        self.coordinates = 0
        # coordinates where +-eps changed a max-pool/maxout selection and eps was shrunk
        self.kink_retries = 0
        self.worst = None

    def __repr__(self):
        return (f"GradCheckReport(max_error={self.max_error:.3g}, coordinates={self.coordinates}, "
                f"kink_retries={self.kink_retries}, worst={self.worst})")


def _evaluate(fn) -> tuple[float, list]:
    with no_grad(), _record_selections() as log:
        value = float(fn().data.sum())
    return value, log


def grad_check_report(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      stencil: int = 5, min_eps: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients with central differences coordinate by coordinate.

    Relative error is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``. The default
    five-point central stencil has O(eps^4) truncation error, which keeps
    near-zero gradients resolvable at eps = 1e-3; ``stencil=3`` gives the
    plain two-sided difference.

    Differences are meaningless across a max-selection boundary, so when a
    perturbed evaluation picks different max-pool/maxout winners than the
    unperturbed point, eps is divided by 10 for that coordinate until the
    selections agree (down to ``min_eps``). ``max_coords`` samples that many
    coordinates per parameter instead of checking all of them.
    """
    if stencil == 5:
        offsets, weights, denom = (2.0, 1.0, -1.0, -2.0), (-1.0, 8.0, -8.0, 1.0), 12.0
    elif stencil == 3:
        offsets, weights, denom = (1.0, -1.0), (1.0, -1.0), 2.0
    else:
        raise ValueError("stencil must be 3 or 5")
    params = list(params)
    report = GradCheckReport()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    _, base_sel = _evaluate(fn)
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in coords:
            orig = flat[k]
            h = eps
            while True:
                values, smooth = [], True
                for off in offsets:
                    flat[k] = orig + off * h
                    v, sel = _evaluate(fn)
                    values.append(v)
                    smooth = smooth and sel == base_sel
                flat[k] = orig
                if smooth or h / 10 < min_eps:
                    break
                h /= 10
                report.kink_retries += 1
            gn = sum(w * v for w, v in zip(weights, values)) / (denom * h)
            a = float(analytic[k])
            err = abs(a - gn) / max(abs(a), abs(gn), 1e-8)
            report.coordinates += 1
            if err > report.max_error:
                report.max_error = err
                report.worst = (pi, int(k), a, gn, h)
    return report


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3, **kwargs) -> float:
    """Largest relative error between tape gradients and central differences.

    Use float64 parameters; single precision cannot resolve eps=1e-3 steps.
    See :func:`grad_check_report` for the options.
    """
    return grad_check_report(fn, params, eps, **kwargs).max_error
