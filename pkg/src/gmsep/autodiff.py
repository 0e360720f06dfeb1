"""Reverse-mode automatic differentiation over numpy arrays.

A GraphTape records every primitive applied while it is active; a backward
pass walks the tape once in reverse recording order and accumulates
gradients by tensor identity. Parameters live in a ParamStore keyed by
layer name, each with a gradient slot and two optimizer moment slots of
the same shape.

Design constraints:
  * one forward episode is single-threaded with respect to one tape;
  * a tape supports several backward passes from different scalar roots
    as long as ``retain=True`` is passed, and errors once consumed;
  * every primitive has a deterministic forward and backward.

The recurrent cell is a bidirectional GRU fused into a single tape entry
with a hand-written backward pass; both directions run as one batched
recurrence over block-diagonal weights, which keeps the per-step numpy
call count low enough for minutes-scale training.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """Operands disagree with an op's shape contract."""


class TapeConsumed(RuntimeError):
    """A GraphTape was used after its backward pass consumed it."""


_TAPE = None
_GRAD_ON = True


def _shape_error(op, *shapes):
    return ShapeMismatch(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    """N-dimensional real array participating in the recorded graph."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        """A leaf view of the same values, cut off from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        return t

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return asum(self, axis)

    def mean(self, axis=None):
        return amean(self, axis)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out, inputs, backward_fn):
    if _GRAD_ON and _TAPE is not None:
        if _TAPE._consumed:
            raise TapeConsumed("cannot record onto a consumed GraphTape")
        _TAPE._ops.append((out, inputs, backward_fn))


def _out(data, inputs, backward_fn):
    t = Tensor.__new__(Tensor)
    t.data = data
    _record(t, inputs, backward_fn)
    return t


@contextmanager
def no_grad():
    """Disable tape recording inside the block (detached computation)."""
    global _GRAD_ON
    prev = _GRAD_ON
    _GRAD_ON = False
    try:
        yield
    finally:
        _GRAD_ON = prev


def is_recording():
    return _GRAD_ON and _TAPE is not None


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


class GradientSet:
    """Per-layer flattened gradient vectors for one task."""

    __slots__ = ("grads", "task")

    def __init__(self, grads, task=""):
        self.grads = dict(grads)
        self.task = task

    def __getitem__(self, key):
        return self.grads[key]

    def __contains__(self, key):
        return key in self.grads

    def __len__(self):
        return len(self.grads)

    def __iter__(self):
        return iter(self.grads)

    def keys(self):
        return self.grads.keys()

    def items(self):
        return self.grads.items()

    def copy(self):
        return GradientSet({k: v.copy() for k, v in self.grads.items()}, self.task)

    def global_norm(self):
        total = 0.0
        for v in self.grads.values():
            total += float(v @ v)
        return math.sqrt(total)


class GraphTape:
    """Linear record of primitive ops for one forward episode."""

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("another GraphTape is already active")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss, params, retain=False, task=""):
        """Backpropagate from a recorded scalar into a ParamStore.

        Fills each parameter's gradient slot (zeros where the parameter is
        unreachable from ``loss``) and returns a GradientSet snapshot with
        one flattened vector per parameter name. Unless ``retain`` is set
        the tape is consumed and a second call raises TapeConsumed.
        """
        if self._consumed:
            raise TapeConsumed("this GraphTape was already consumed by backward")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for t, ig in zip(inputs, input_grads):
                if ig is None:
                    continue
                k = id(t)
                acc = grads.get(k)
                if acc is None:
                    grads[k] = ig
                elif acc.flags.writeable:
                    acc += ig
                else:
                    grads[k] = acc + ig
        snapshot = {}
        for name, p in params.items():
            g = grads.get(id(p.tensor))
            if g is None:
                g = np.zeros(p.tensor.data.shape, dtype=np.float64)
            # snapshots are float64 so the per-layer gradient geometry
            # (projections, dot-product sign tests) is exact regardless of
            # the parameter width used for training
            g = np.asarray(g, dtype=np.float64)
            p.grad[...] = g.reshape(p.grad.shape).astype(p.grad.dtype, copy=False)
            snapshot[name] = g.ravel().copy()
        if not retain:
            self._consumed = True
        return GradientSet(snapshot, task=task)


def backward(loss, params, tape, retain=False, task=""):
    """Free-function form of GraphTape.backward."""
    return tape.backward(loss, params, retain=retain, task=task)


class Param:
    """One trainable array plus gradient and optimizer moment slots."""

    __slots__ = ("tensor", "grad", "m", "v")

    def __init__(self, tensor):
        self.tensor = tensor
        self.grad = np.zeros_like(tensor.data)
        self.m = np.zeros_like(tensor.data)
        self.v = np.zeros_like(tensor.data)

    @property
    def shape(self):
        return self.tensor.data.shape


class ParamStore:
    """Ordered map of layer name -> trainable parameter.

    Iteration order is insertion order, which makes gradient snapshots,
    initialization draws and checkpoints deterministic for a fixed
    construction sequence and seed.
    """

    def __init__(self, dtype=np.float64, seed=0):
        self._params: dict[str, Param] = {}
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)

    def add(self, name, shape, fan_in=None, init="uniform", value=None):
        """Create and register a parameter, returning its Tensor.

        ``uniform`` draws from [-1/sqrt(fan_in), +1/sqrt(fan_in)] with
        fan_in defaulting to the last extent; ``zeros``/``ones``/``const``
        are for gains, biases and activation slopes.
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            fi = fan_in if fan_in is not None else shape[-1]
            bound = 1.0 / math.sqrt(max(1, fi))
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "const":
            data = np.full(shape, float(value))
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype))
        self._params[name] = Param(t)
        return t

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def param(self, name):
        return self._params[name]

    def tensor(self, name):
        return self._params[name].tensor

    def subset(self, *prefixes):
        """A view restricted to names starting with any prefix.

        Parameters (and their slots) are shared with the parent store.
        """
        sub = ParamStore.__new__(ParamStore)
        sub._params = {n: p for n, p in self._params.items() if n.startswith(tuple(prefixes))}
        sub.dtype = self.dtype
        sub._rng = self._rng
        return sub

    def zero_grads(self):
        for p in self._params.values():
            p.grad.fill(0.0)

    def n_parameters(self):
        return sum(p.tensor.data.size for p in self._params.values())

    def state_dict(self):
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state):
        for n, p in self._params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n!r} in state")
            arr = np.asarray(state[n], dtype=p.tensor.data.dtype)
            if arr.shape != p.tensor.data.shape:
                raise _shape_error(f"load_state_dict[{n}]", arr.shape, p.tensor.data.shape)
            p.tensor.data[...] = arr


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    ash, bsh = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _out(data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None
    ash, bsh = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _out(data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _out(data, (a, b), bw)


def div(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise _shape_error("div", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _out(data, (a, b), bw)


def neg(a):
    a = _lift(a)
    return _out(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = _lift(a)
    ad = a.data
    return _out(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def log(a):
    a = _lift(a)
    ad = a.data
    return _out(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a):
    a = _lift(a)
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _out(data, (a,), bw)


def prelu(a, slope):
    """Parametric ReLU with a shared scalar slope on the negative side."""
    a, slope = _lift(a), _lift(slope)
    if slope.data.size != 1:
        raise _shape_error("prelu slope", slope.shape, (1,))
    s = slope.data.item()
    pos = a.data > 0
    data = np.where(pos, a.data, s * a.data)
    ad = a.data

    def bw(g):
        ga = np.where(pos, g, s * g)
        gs = np.sum(g * np.where(pos, 0.0, ad)).reshape(slope.data.shape)
        return ga, gs

    return _out(data, (a, slope), bw)


def sigmoid(a):
    a = _lift(a)
    data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def bw(g):
        return (g * data * (1.0 - data),)

    return _out(data, (a,), bw)


def tanh(a):
    a = _lift(a)
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data),)

    return _out(data, (a,), bw)


def maximum_scalar(a, floor):
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = _lift(a)
    floor = float(floor)
    data = np.maximum(a.data, floor)
    mask = a.data > floor

    def bw(g):
        return (g * mask,)

    return _out(data, (a,), bw)


def asum(a, axis=None):
    a = _lift(a)
    data = np.asarray(a.data.sum(axis=axis))
    ash = a.data.shape

    def bw(g):
        if axis is None:
            return (np.full(ash, float(g), dtype=g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), ash).copy(),)

    return _out(data, (a,), bw)


def amean(a, axis=None):
    a = _lift(a)
    data = np.asarray(a.data.mean(axis=axis))
    ash = a.data.shape
    n = a.data.size if axis is None else a.data.shape[axis]

    def bw(g):
        if axis is None:
            return (np.full(ash, float(g) / n, dtype=g.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), ash).copy(),)

    return _out(data, (a,), bw)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    ash = a.data.shape

    def bw(g):
        return (g.reshape(ash),)

    return _out(data, (a,), bw)


def transpose(a, axes=None):
    a = _lift(a)
    data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _out(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _out(data, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("stack", *[t.shape for t in tensors]) from None

    def bw(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return _out(data, tuple(tensors), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _lift(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise _shape_error(f"narrow(axis={axis}, start={start}, len={length})", a.shape)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(a.data[sl])
    ash = a.data.shape

    def bw(g):
        ga = np.zeros(ash, dtype=g.dtype)
        ga[sl] = g
        return (ga,)

    return _out(data, (a,), bw)


def pad_last(a, new_len):
    """Zero-pad the last axis up to new_len (no-op when already that long)."""
    a = _lift(a)
    cur = a.data.shape[-1]
    if new_len < cur:
        raise _shape_error(f"pad_last(new_len={new_len})", a.shape)
    if new_len == cur:
        return _out(a.data.copy(), (a,), lambda g: (g,))
    width = [(0, 0)] * (a.data.ndim - 1) + [(0, new_len - cur)]
    data = np.pad(a.data, width)

    def bw(g):
        return (np.ascontiguousarray(g[..., :cur]),)

    return _out(data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra, convolution, normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise _shape_error("matmul", ad.shape, bd.shape)
    data = ad @ bd

    def bw(g):
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _out(data, (a, b), bw)


def linear(x, w, b=None):
    """Affine map along the first axis: (in, ...) -> (out, ...)."""
    x, w = _lift(x), _lift(w)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[0] != wd.shape[1]:
        raise _shape_error("linear", xd.shape, wd.shape)
    rest = xd.shape[1:]
    x2 = xd.reshape(xd.shape[0], -1)
    out2 = wd @ x2
    if b is not None:
        b = _lift(b)
        if b.data.shape != (wd.shape[0],):
            raise _shape_error("linear bias", b.data.shape, (wd.shape[0],))
        out2 = out2 + b.data[:, None]
    data = out2.reshape((wd.shape[0],) + rest)

    def bw(g):
        g2 = g.reshape(g.shape[0], -1)
        gw = g2 @ x2.T
        gx = (wd.T @ g2).reshape(xd.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    return _out(data, inputs, bw)


def conv1d(x, kernel, stride=1, padding=0):
    """Valid 1-D correlation of a waveform with a filter bank.

    x: (T,), kernel: (F, k) -> (F, T') with T' = floor((T+2p-k)/stride)+1.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.data.ndim != 1 or kernel.data.ndim != 2:
        raise _shape_error("conv1d", x.shape, kernel.shape)
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    xd = np.pad(x.data, (padding, padding)) if padding else x.data
    k = kernel.data.shape[1]
    if xd.shape[0] < k:
        raise _shape_error(f"conv1d(kernel={k}, stride={stride})", x.shape, kernel.shape)
    windows = sliding_window_view(xd, k)[::stride]  # (T', k)
    data = kernel.data @ windows.T
    kd = kernel.data
    t_out = windows.shape[0]
    t_in = xd.shape[0]

    def bw(g):
        gk = g @ windows
        gw = kd.T @ g  # (k, T')
        gx = np.zeros(t_in, dtype=g.dtype)
        for p in range(k):
            gx[p:p + stride * t_out:stride] += gw[p]
        if padding:
            gx = gx[padding:t_in - padding]
        return np.ascontiguousarray(gx), gk

    return _out(data, (x, kernel), bw)


def transposed_conv1d(y, kernel, stride=1):
    """Adjoint of conv1d: (F, T') with kernel (F, k) -> (T_out,).

    T_out = (T'-1)*stride + k; overlapping filter taps are summed.
    """
    y, kernel = _lift(y), _lift(kernel)
    if y.data.ndim != 2 or kernel.data.ndim != 2 or y.data.shape[0] != kernel.data.shape[0]:
        raise _shape_error("transposed_conv1d", y.shape, kernel.shape)
    if stride < 1:
        raise ValueError(f"transposed_conv1d: stride must be >= 1, got {stride}")
    f, t_in = y.data.shape
    k = kernel.data.shape[1]
    t_out = (t_in - 1) * stride + k
    taps = kernel.data.T @ y.data  # (k, T')
    data = np.zeros(t_out, dtype=taps.dtype)
    for p in range(k):
        data[p:p + stride * t_in:stride] += taps[p]
    yd, kd = y.data, kernel.data

    def bw(g):
        gwin = sliding_window_view(g, k)[::stride]  # (T', k)
        gy = kd @ gwin.T
        gk = yd @ gwin
        return gy, gk

    return _out(data, (y, kernel), bw)


def layer_norm(x, gain, bias, eps=1e-5, axis=0):
    """Normalize along one axis, then scale and shift.

    gain and bias are 1-D with length x.shape[axis] and broadcast over the
    remaining axes.
    """
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    n = x.data.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise _shape_error(f"layer_norm(axis={axis})", x.shape, gain.shape, bias.shape)
    bshape = [1] * x.data.ndim
    bshape[axis] = n
    gb = gain.data.reshape(bshape)
    bb = bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gb * xhat + bb
    red = tuple(i for i in range(x.data.ndim) if i != axis)

    def bw(g):
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gxh = g * gb
        gx = inv * (gxh - gxh.mean(axis=axis, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=axis, keepdims=True))
        return gx, ggain, gbias

    return _out(data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# framing (chunk <-> sequence) primitives
# ---------------------------------------------------------------------------

def frame(x, size, hop):
    """Slice (F, T) into overlapping frames (F, size, S), S = (T-size)//hop + 1."""
    x = _lift(x)
    if x.data.ndim != 2 or x.data.shape[1] < size:
        raise _shape_error(f"frame(size={size}, hop={hop})", x.shape)
    windows = sliding_window_view(x.data, size, axis=1)[:, ::hop]  # (F, S, size)
    data = np.ascontiguousarray(windows.transpose(0, 2, 1))  # (F, size, S)
    f, t = x.data.shape
    s = data.shape[2]

    def bw(g):
        gx = np.zeros((f, t), dtype=g.dtype)
        for p in range(size):
            gx[:, p:p + hop * s:hop] += g[:, p, :]
        return (gx,)

    return _out(data, (x,), bw)


def overlap_add_frames(frames, hop):
    """Sum overlapping frames (F, K, S) back into (F, (S-1)*hop + K)."""
    frames = _lift(frames)
    if frames.data.ndim != 3:
        raise _shape_error("overlap_add_frames", frames.shape)
    f, k, s = frames.data.shape
    t = (s - 1) * hop + k
    data = np.zeros((f, t), dtype=frames.data.dtype)
    for p in range(k):
        data[:, p:p + hop * s:hop] += frames.data[:, p, :]

    def bw(g):
        windows = sliding_window_view(g, k, axis=1)[:, ::hop]  # (F, S, k)
        return (np.ascontiguousarray(windows.transpose(0, 2, 1)),)

    return _out(data, (frames,), bw)


# ---------------------------------------------------------------------------
# fused bidirectional GRU
# ---------------------------------------------------------------------------

@dataclass
class GruDirection:
    """One direction's cell parameters; gate rows stacked [update; reset; candidate]."""
    w_in: Tensor   # (3H, F)
    w_rec: Tensor  # (3H, H)
    bias: Tensor   # (3H,)


@dataclass
class BiGruCell:
    fw: GruDirection
    bw: GruDirection
    hidden: int


def make_bigru(store, prefix, in_dim, hidden):
    """Register both directions' parameters under ``prefix`` and return the cell."""
    dirs = []
    for d in ("fw", "bw"):
        w_in = store.add(f"{prefix}.{d}.w_in", (3 * hidden, in_dim), fan_in=in_dim)
        w_rec = store.add(f"{prefix}.{d}.w_rec", (3 * hidden, hidden), fan_in=hidden)
        bias = store.add(f"{prefix}.{d}.bias", (3 * hidden,), fan_in=hidden)
        dirs.append(GruDirection(w_in, w_rec, bias))
    return BiGruCell(dirs[0], dirs[1], hidden)


def _sigmoid_inplace(a):
    a *= 0.5
    np.tanh(a, out=a)
    a += 1.0
    a *= 0.5
    return a


def bi_recurrent(x, cell):
    """Bidirectional gated recurrence along the second axis.

    x: (F, L) or (F, L, B) -> (2H, L) or (2H, L, B); rows 0..H are the
    left-to-right states, rows H..2H the right-to-left states, both in
    input time order. The whole pass is one tape entry with an exact
    hand-written backward (verified against finite differences).

    Both directions run as a single batched recurrence: their weights are
    laid out block-diagonally over a doubled state axis and the
    right-to-left half reads time-reversed input projections.
    """
    x = _lift(x)
    squeeze = x.data.ndim == 2
    xd = x.data[:, :, None] if squeeze else x.data
    if xd.ndim != 3:
        raise _shape_error("bi_recurrent", x.shape)
    f, ell, b = xd.shape
    if ell < 1:
        raise _shape_error("bi_recurrent (needs L >= 1)", x.shape)
    h = cell.hidden
    hc = 2 * h
    fw, bwd = cell.fw, cell.bw
    if fw.w_in.data.shape != (3 * h, f):
        raise _shape_error("bi_recurrent w_in", fw.w_in.shape, (3 * h, f))
    dt = xd.dtype

    # direction-stacked input weights / biases; gate blocks [z | r | n] of height Hc
    w_all = np.empty((3 * hc, f), dtype=dt)
    b_all = np.empty(3 * hc, dtype=dt)
    for gi in range(3):
        lo, mid, hi = gi * hc, gi * hc + h, (gi + 1) * hc
        w_all[lo:mid] = fw.w_in.data[gi * h:(gi + 1) * h]
        w_all[mid:hi] = bwd.w_in.data[gi * h:(gi + 1) * h]
        b_all[lo:mid] = fw.bias.data[gi * h:(gi + 1) * h]
        b_all[mid:hi] = bwd.bias.data[gi * h:(gi + 1) * h]
    # block-diagonal recurrent weights keep the two directions independent
    u_zr = np.zeros((2 * hc, hc), dtype=dt)
    u_zr[0:h, 0:h] = fw.w_rec.data[0:h]
    u_zr[h:hc, h:hc] = bwd.w_rec.data[0:h]
    u_zr[hc:hc + h, 0:h] = fw.w_rec.data[h:2 * h]
    u_zr[hc + h:2 * hc, h:hc] = bwd.w_rec.data[h:2 * h]
    u_n = np.zeros((hc, hc), dtype=dt)
    u_n[0:h, 0:h] = fw.w_rec.data[2 * h:3 * h]
    u_n[h:hc, h:hc] = bwd.w_rec.data[2 * h:3 * h]

    x2 = xd.reshape(f, ell * b)
    pre = (w_all @ x2 + b_all[:, None]).reshape(3 * hc, ell, b)
    prestep = np.empty_like(pre)
    for gi in range(3):
        lo, mid, hi = gi * hc, gi * hc + h, (gi + 1) * hc
        prestep[lo:mid] = pre[lo:mid]
        prestep[mid:hi] = pre[mid:hi, ::-1]

    state = np.zeros((hc, b), dtype=dt)
    hs = [state]
    zr_list, n_list, rh_list = [], [], []
    for t in range(ell):
        azr = u_zr @ state
        azr += prestep[0:2 * hc, t]
        zr = _sigmoid_inplace(azr)
        z = zr[:hc]
        r = zr[hc:]
        rh = r * state
        an = u_n @ rh
        an += prestep[2 * hc:, t]
        n = np.tanh(an)
        d = n - state
        d *= z
        state = state + d
        hs.append(state)
        zr_list.append(zr)
        n_list.append(n)
        rh_list.append(rh)

    states = np.stack(hs[1:], axis=1)  # (Hc, L, B)
    out = np.empty((hc, ell, b), dtype=dt)
    out[:h] = states[:h]
    out[h:] = states[h:, ::-1]
    out_data = out.reshape(hc, ell) if squeeze else out

    u_zr_t = u_zr.T.copy()
    u_n_t = u_n.T.copy()

    def bw(g):
        gd = g.reshape(hc, ell, 1) if squeeze else g
        g_states = np.empty((hc, ell, b), dtype=dt)
        g_states[:h] = gd[:h]
        g_states[h:] = gd[h:, ::-1]
        gate_grads = np.empty((3 * hc, ell, b), dtype=dt)
        dh = np.zeros((hc, b), dtype=dt)
        for t in range(ell - 1, -1, -1):
            dh = dh + g_states[:, t]
            zr = zr_list[t]
            z = zr[:hc]
            r = zr[hc:]
            n = n_list[t]
            hp = hs[t]
            dz = dh * (n - hp)
            dn = dh * z
            dhp = dh - dn
            t3 = n * n
            np.subtract(1.0, t3, out=t3)
            dan = dn * t3
            gate_grads[2 * hc:, t] = dan
            drh = u_n_t @ dan
            dhp += drh * r
            dr = drh * hp
            w1 = 1.0 - z
            w1 *= z
            gate_grads[0:hc, t] = dz * w1
            w2 = 1.0 - r
            w2 *= r
            gate_grads[hc:2 * hc, t] = dr * w2
            dh = dhp + u_zr_t @ gate_grads[0:2 * hc, t]
        # undo the time flip of the backward-direction halves
        gpre = np.empty_like(gate_grads)
        for gi in range(3):
            lo, mid, hi = gi * hc, gi * hc + h, (gi + 1) * hc
            gpre[lo:mid] = gate_grads[lo:mid]
            gpre[mid:hi] = gate_grads[mid:hi, ::-1]
        gp2 = gpre.reshape(3 * hc, ell * b)
        g_w_all = gp2 @ x2.T
        g_b_all = gp2.sum(axis=1)
        gx = (w_all.T @ gp2).reshape(f, ell, b)
        h_prev = np.stack(hs[:ell], axis=1).reshape(hc, ell * b)
        g_u_zr = gate_grads[0:2 * hc].reshape(2 * hc, ell * b) @ h_prev.T
        rh_all = np.stack(rh_list, axis=1).reshape(hc, ell * b)
        g_u_n = gate_grads[2 * hc:].reshape(hc, ell * b) @ rh_all.T

        def in_rows(base):
            return np.concatenate([g_w_all[gi * hc + base:gi * hc + base + h] for gi in range(3)])

        def bias_rows(base):
            return np.concatenate([g_b_all[gi * hc + base:gi * hc + base + h] for gi in range(3)])

        g_fw_w_in = in_rows(0)
        g_bw_w_in = in_rows(h)
        g_fw_bias = bias_rows(0)
        g_bw_bias = bias_rows(h)
        g_fw_w_rec = np.concatenate([g_u_zr[0:h, 0:h], g_u_zr[hc:hc + h, 0:h], g_u_n[0:h, 0:h]])
        g_bw_w_rec = np.concatenate([g_u_zr[h:hc, h:hc], g_u_zr[hc + h:2 * hc, h:hc], g_u_n[h:hc, h:hc]])
        gx_out = gx.reshape(f, ell) if squeeze else gx
        return gx_out, g_fw_w_in, g_fw_w_rec, g_fw_bias, g_bw_w_in, g_bw_w_rec, g_bw_bias

    inputs = (x, fw.w_in, fw.w_rec, fw.bias, bwd.w_in, bwd.w_rec, bwd.bias)
    return _out(out_data, inputs, bw)
