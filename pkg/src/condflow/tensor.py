"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a row-major numpy array together with the tape record
needed for backpropagation: the parent tensors it was computed from and a
closure that routes an incoming gradient to those parents. Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order. The graph is rebuilt on every evaluation, so one training step owns
exactly one tape.

Conventions, fixed throughout the package:

* values are float64; results of every op are finite unless the op's error
  contract fires first (division by exact zero, log of a non-positive value,
  overflow in exp);
* feature maps are laid out height x width x channels;
* elementwise binaries require identical shapes, except that a ``(1, c)`` or
  ``(c,)`` operand broadcasts over an ``(..., c)`` operand along the channel
  axis. No other broadcasting is supported;
* ``conv2d`` is cross-correlation (no kernel flip), the usual deep-learning
  convention, which is what the reference oracles in the tests implement.

Tensors are immutable values after construction; only optimizer steps write
to parameter ``.data`` buffers, and they require exclusive access.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import linalg


class NumericsError(ArithmeticError):
    """A numeric contract was violated (non-finite value, bad domain)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block. Evaluation only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus its differentiation record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda a, b, g: g, lambda a, b, g: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda a, b, g: g, lambda a, b, g: -g)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda a, b, g: g * b, lambda a, b, g: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        if np.any(other.data == 0.0):
            raise ZeroDivisionError("elementwise division by exact zero")
        return _binary("div", self, other, lambda a, b: a / b,
                       lambda a, b, g: g / b, lambda a, b, g: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return _unary("neg", self, -self.data, lambda g: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise nonlinearities --------------------------------------

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        if not np.all(np.isfinite(out)):
            raise NumericsError("exp overflowed to a non-finite value")
        return _unary("exp", self, out, lambda g: g * out)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise NumericsError("log of a non-positive value")
        return _unary("log", self, np.log(self.data), lambda g: g / self.data)

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return _unary("sigmoid", self, out, lambda g: g * out * (1.0 - out))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _unary("relu", self, np.where(mask, self.data, 0.0),
                      lambda g: g * mask)

    # -- reductions and shape moves --------------------------------------

    def sum(self) -> "Tensor":
        """Sum of all elements, as a shape-(1,) tensor."""
        shape = self.shape
        return _unary("sum", self, np.array([self.data.sum()]),
                      lambda g: np.full(shape, g.reshape(-1)[0]))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _unary("reshape", self, self.data.reshape(shape),
                      lambda g: g.reshape(old))

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(int(i) for i in np.argsort(axes))
        return _unary("transpose", self, self.data.transpose(axes),
                      lambda g: g.transpose(inv))

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that collects gradients during training."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# -- op plumbing ----------------------------------------------------------


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr)


def _make(data, op, parents, backward) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents,
                  backward=backward)


def _unary(op, t, data, grad_fn) -> Tensor:
    def bwd(g, out):
        _accumulate(t, grad_fn(g))
    return _make(data, op, (t,), bwd)


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1,):   # scalar broadcasts over anything
            return
        if (len(small) <= 2 and len(big) >= len(small) and big != small
                and small[-1] == big[-1] and (len(small) == 1 or small[0] == 1)):
            return
    raise ValueError(f"shapes {sa} and {sb} neither match nor follow the "
                     "(1, c) over (..., c) broadcast rule")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1,):
        return g.sum().reshape(1)
    axes = tuple(range(g.ndim - (len(shape) - 1) if len(shape) == 2 else g.ndim - 1))
    return g.sum(axis=axes).reshape(shape)


def _binary(op, a, b, fwd, grad_a, grad_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def bwd(g, out):
        _accumulate(a, _unbroadcast(grad_a(a.data, b.data, g), a.shape))
        _accumulate(b, _unbroadcast(grad_b(a.data, b.data, g), b.shape))
    return _make(data, op, (a, b), bwd)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # rebind rather than mutate: g may be shared with another edge
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


# -- matrix and convolution ops ------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g, out):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of an (h, w, c_in) map with a
    (k_h, k_w, c_in, c_out) kernel. Stride and padding may be per-axis pairs.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects (h,w,c_in) and (kh,kw,c_in,c_out), "
                         f"got {x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel input channels {kcin} != input channels {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {sh}x{sw}, padding {ph}x{pw}")

    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((ho * wo, kh * kw * cin))
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + sh * ho:sh, j:j + sw * wo:sw, :]
            cols[:, (i * kw + j) * cin:(i * kw + j + 1) * cin] = \
                patch.reshape(ho * wo, cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(ho, wo, cout)

    def bwd(g, _):
        gmat = g.reshape(ho * wo, cout)
        _accumulate(kernel, (cols.T @ gmat).reshape(kernel.shape))
        if x.requires_grad:
            gcols = gmat @ kmat.T
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + sh * ho:sh, j:j + sw * wo:sw, :] += \
                        gcols[:, (i * kw + j) * cin:(i * kw + j + 1) * cin] \
                        .reshape(ho, wo, cin)
            _accumulate(x, gxp[ph:ph + h, pw:pw + w, :])
    return _make(out, "conv2d", (x, kernel), bwd)


def slogdet_lu(w: Tensor) -> tuple[float, Tensor]:
    """Sign and log|det| of a square matrix, differentiable in the log part.

    Gradient: d log|det W| / dW = inverse(W) transposed. Raises
    SingularMatrixError when a pivot falls below the working threshold.
    """
    w = _as_tensor(w)
    sign, logabs = linalg.slogdet(w.data)

    def bwd(g, _):
        _accumulate(w, g.reshape(-1)[0] * linalg.inverse(w.data).T)
    return sign, _make(np.array([logabs]), "slogdet", (w,), bwd)


def mat_inverse(w: Tensor) -> Tensor:
    """Matrix inverse; gradient is -W^-T g W^-T."""
    w = _as_tensor(w)
    inv = linalg.inverse(w.data)

    def bwd(g, _):
        _accumulate(w, -inv.T @ g @ inv.T)
    return _make(inv, "inverse", (w,), bwd)


# -- channel-axis surgery --------------------------------------------------


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    t = _as_tensor(t)
    c = t.shape[-1]
    if not (0 <= start < stop <= c):
        raise IndexError(f"channel slice [{start}:{stop}] out of range for {c} "
                         "channels")

    def bwd(g, _):
        if t.requires_grad:
            full = np.zeros(t.shape)
            full[..., start:stop] = g
            _accumulate(t, full)
    return _make(t.data[..., start:stop], "slice_c", (t,), bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels of an empty list")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ValueError("concat_channels operands disagree on leading "
                             f"dims: {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bwd(g, _):
        for p, a, b in zip(parts, offs[:-1], offs[1:]):
            _accumulate(p, g[..., a:b])
    return _make(np.concatenate([p.data for p in parts], axis=-1),
                 "concat_c", tuple(parts), bwd)


# -- the tape walk ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable gradient-requiring tensor.

    ``loss`` must be a scalar (one element). Visits nodes in reverse
    topological order; the order is a pure function of how the graph was
    built, so replaying the same ops yields bitwise-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape "
                         f"{loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)
