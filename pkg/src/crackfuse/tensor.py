"""Dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 supported where tests
need tight tolerances). Each op records the tensors it consumed plus a
closure mapping the upstream gradient to per-input partials;
``Tensor.backward`` walks that graph in reverse topological order.
Gradients accumulate across backward calls until explicitly zeroed.

Binary ops require equal shapes or a scalar operand; anything richer goes
through explicit ``reshape``/``expand``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

# Sentinel used to pad maxpool windows so padded cells never win the max.
MAXPOOL_PAD_VALUE = -3.4e38

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_dtype(dtype):
    if dtype is None:
        return None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = _as_dtype(dtype)
        arr = np.asarray(data)
        if dt is not None:
            arr = arr.astype(dt, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        # Maps upstream grad -> tuple of partials aligned with _parents.
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    # ------------------------------------------------------------------
    # introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # ------------------------------------------------------------------
    # constructors

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad=False, dtype=np.float32):
        return Tensor(np.full(shape, value, dtype=_as_dtype(dtype)), requires_grad)

    # ------------------------------------------------------------------
    # graph plumbing

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...],
              grad_fn: Callable[[np.ndarray], tuple]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
        return out

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar; populates .grad on every reachable
        tensor with requires_grad. Closures must never mutate the incoming
        gradient in place (staged arrays can be shared between edges)."""
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        # Per-call staging keeps repeated backward() invocations additive.
        staged: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = staged.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._grad_fn is None:
                continue
            partials = node._grad_fn(g)
            for parent, pg in zip(node._parents, partials):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in staged:
                    staged[key] = staged[key] + pg
                else:
                    staged[key] = pg

    # ------------------------------------------------------------------
    # elementwise ops

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        # Python scalars adopt this tensor's dtype so float32 graphs stay float32.
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _binary_shapes(a: "Tensor", b: "Tensor"):
        if a.shape == b.shape or a.size == 1 or b.size == 1:
            return
        raise ShapeError(f"operands have incompatible shapes {a.shape} vs {b.shape} "
                         "(equal shapes or a scalar operand required)")

    @staticmethod
    def _to_operand(a: "Tensor", g: np.ndarray) -> np.ndarray:
        # Reduce a broadcast gradient back onto a scalar operand.
        if g.shape == a.shape:
            return g
        return np.sum(g, dtype=g.dtype).reshape(a.shape)

    def add(self, other) -> "Tensor":
        b = self._coerce(other)
        self._binary_shapes(self, b)
        out = self.data + b.data

        def grad_fn(g):
            return (self._to_operand(self, g), self._to_operand(b, g))
        return self._make(out, (self, b), grad_fn)

    def sub(self, other) -> "Tensor":
        b = self._coerce(other)
        self._binary_shapes(self, b)
        out = self.data - b.data

        def grad_fn(g):
            return (self._to_operand(self, g), self._to_operand(b, -g))
        return self._make(out, (self, b), grad_fn)

    def mul(self, other) -> "Tensor":
        b = self._coerce(other)
        self._binary_shapes(self, b)
        out = self.data * b.data

        def grad_fn(g):
            return (self._to_operand(self, g * b.data),
                    self._to_operand(b, g * self.data))
        return self._make(out, (self, b), grad_fn)

    def div(self, other) -> "Tensor":
        b = self._coerce(other)
        self._binary_shapes(self, b)
        out = self.data / b.data

        def grad_fn(g):
            return (self._to_operand(self, g / b.data),
                    self._to_operand(b, -g * self.data / (b.data * b.data)))
        return self._make(out, (self, b), grad_fn)

    def neg(self) -> "Tensor":
        def grad_fn(g):
            return (-g,)
        return self._make(-self.data, (self,), grad_fn)

    def scale(self, c: float) -> "Tensor":
        c = float(c)

        def grad_fn(g):
            return (g * c,)
        return self._make(self.data * np.asarray(c, dtype=self.data.dtype),
                          (self,), grad_fn)

    def relu(self) -> "Tensor":
        mask = self.data > 0

        def grad_fn(g):
            return (g * mask,)
        return self._make(np.where(mask, self.data, 0), (self,), grad_fn)

    def sigmoid(self) -> "Tensor":
        x = self.data
        # Stable in both tails.
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        y = y.astype(x.dtype, copy=False)

        def grad_fn(g):
            return (g * y * (1.0 - y),)
        return self._make(y, (self,), grad_fn)

    def exp(self) -> "Tensor":
        y = np.exp(self.data)

        def grad_fn(g):
            return (g * y,)
        return self._make(y, (self,), grad_fn)

    def log(self) -> "Tensor":
        def grad_fn(g):
            return (g / self.data,)
        return self._make(np.log(self.data), (self,), grad_fn)

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)

        def grad_fn(g):
            return (g / (2.0 * y),)
        return self._make(y, (self,), grad_fn)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        mask = (self.data >= lo) & (self.data <= hi)

        def grad_fn(g):
            return (g * mask,)
        return self._make(np.clip(self.data, lo, hi), (self,), grad_fn)

    __add__ = add
    __sub__ = sub
    __mul__ = mul
    __truediv__ = div
    __neg__ = neg

    def __radd__(self, other):
        return self._coerce(other).add(self)

    def __rsub__(self, other):
        return self._coerce(other).sub(self)

    def __rmul__(self, other):
        return self._coerce(other).mul(self)

    def __rtruediv__(self, other):
        return self._coerce(other).div(self)

    # ------------------------------------------------------------------
    # linear algebra

    def matmul(self, other: "Tensor") -> "Tensor":
        b = other if isinstance(other, Tensor) else Tensor(other)
        if self.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul requires 2-D tensors, got {self.shape} and {b.shape}")
        if self.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions disagree: {self.shape} x {b.shape}")
        out = self.data @ b.data

        def grad_fn(g):
            return (g @ b.data.T, self.data.T @ g)
        return self._make(out, (self, b), grad_fn)

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # shape ops

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        orig = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(str(e)) from e

        def grad_fn(g):
            return (g.reshape(orig),)
        return self._make(out, (self,), grad_fn)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def grad_fn(g):
            return (np.ascontiguousarray(g.transpose(inv)),)
        return self._make(np.ascontiguousarray(self.data.transpose(axes)),
                          (self,), grad_fn)

    def expand(self, shape) -> "Tensor":
        """Repeat along size-1 axes; gradient sums back over those axes."""
        shape = tuple(shape)
        if len(shape) != self.ndim:
            raise ShapeError(f"expand rank mismatch: {self.shape} -> {shape}")
        axes = []
        for i, (a, b) in enumerate(zip(self.shape, shape)):
            if a == b:
                continue
            if a != 1:
                raise ShapeError(f"can only expand size-1 axes: {self.shape} -> {shape}")
            axes.append(i)
        axes = tuple(axes)
        out = np.broadcast_to(self.data, shape)

        def grad_fn(g):
            return (g.sum(axis=axes, keepdims=True) if axes else g,)
        return self._make(out, (self,), grad_fn)

    # ------------------------------------------------------------------
    # reductions

    @staticmethod
    def _norm_axes(axes, ndim) -> tuple[int, ...]:
        if axes is None:
            return tuple(range(ndim))
        if isinstance(axes, int):
            axes = (axes,)
        norm = []
        for a in axes:
            if not -ndim <= a < ndim:
                raise ShapeError(f"axis {a} invalid for rank {ndim}")
            norm.append(a % ndim)
        if len(set(norm)) != len(norm):
            raise ShapeError(f"duplicate reduction axes {axes}")
        return tuple(sorted(norm))

    def _reduce(self, axes, keepdims, mean: bool) -> "Tensor":
        axes = self._norm_axes(axes, self.ndim)
        count = 1
        for a in axes:
            count *= self.shape[a]
        out = self.data.sum(axis=axes, keepdims=keepdims)
        if mean:
            out = out / count
        orig_shape = self.shape

        def grad_fn(g):
            gb = g
            if not keepdims:
                for a in axes:
                    gb = np.expand_dims(gb, a)
            gb = np.broadcast_to(gb, orig_shape)
            return (gb / count if mean else gb,)
        return self._make(out, (self,), grad_fn)

    def sum(self, axes=None, keepdims=False) -> "Tensor":
        return self._reduce(axes, keepdims, mean=False)

    def mean(self, axes=None, keepdims=False) -> "Tensor":
        return self._reduce(axes, keepdims, mean=True)

    # ------------------------------------------------------------------
    # softmax

    def softmax(self, axis: int) -> "Tensor":
        if not -self.ndim <= axis < self.ndim:
            raise ShapeError(f"softmax axis {axis} invalid for rank {self.ndim}")
        axis = axis % self.ndim
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def grad_fn(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)
        return self._make(y, (self,), grad_fn)

    # ------------------------------------------------------------------
    # spatial ops on (C, H, W) maps

    def conv2d(self, w: "Tensor", b: "Tensor | None" = None,
               stride: int = 1, pad: int = 0) -> "Tensor":
        x = self
        if x.ndim != 3 or w.ndim != 4:
            raise ShapeError(f"conv2d expects x (C,H,W) and w (Co,Ci,k,k), "
                             f"got {x.shape} and {w.shape}")
        cin, H, W = x.shape
        cout, cin_w, kh, kw = w.shape
        if cin != cin_w:
            raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
        if b is not None and b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        if stride < 1 or pad < 0 or kh < 1 or kw < 1:
            raise ShapeError("conv2d requires stride >= 1, pad >= 0, k >= 1")
        hout = (H + 2 * pad - kh) // stride + 1
        wout = (W + 2 * pad - kw) // stride + 1
        if hout < 1 or wout < 1:
            raise ShapeError(f"conv2d output would be empty for input {x.shape}, "
                             f"k={kh}, stride={stride}, pad={pad}")

        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = np.empty((cin, kh, kw, hout, wout), dtype=xp.dtype)
        for ky in range(kh):
            ys = slice(ky, ky + (hout - 1) * stride + 1, stride)
            for kx in range(kw):
                xs = slice(kx, kx + (wout - 1) * stride + 1, stride)
                cols[:, ky, kx] = xp[:, ys, xs]
        cols2 = cols.reshape(cin * kh * kw, hout * wout)
        wm = w.data.reshape(cout, -1)
        out = wm @ cols2
        if b is not None:
            out = out + b.data[:, None]
        out = out.reshape(cout, hout, wout)

        def grad_fn(g):
            gm = g.reshape(cout, -1)
            dw = (gm @ cols2.T).reshape(w.shape)
            dcols = (wm.T @ gm).reshape(cin, kh, kw, hout, wout)
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                ys = slice(ky, ky + (hout - 1) * stride + 1, stride)
                for kx in range(kw):
                    xs = slice(kx, kx + (wout - 1) * stride + 1, stride)
                    dxp[:, ys, xs] += dcols[:, ky, kx]
            dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
            db = gm.sum(axis=1) if b is not None else None
            return (dx, dw, db)

        parents = (x, w) if b is None else (x, w, b)
        return self._make(out, parents, grad_fn)

    def maxpool2d(self, k: int, stride: int = 1, pad: int = 0,
                  pad_value: float = MAXPOOL_PAD_VALUE) -> "Tensor":
        x = self
        if x.ndim != 3:
            raise ShapeError(f"maxpool2d expects (C,H,W), got {x.shape}")
        if k < 1 or stride < 1 or pad < 0:
            raise ShapeError("maxpool2d requires k >= 1, stride >= 1, pad >= 0")
        C, H, W = x.shape
        hout = (H + 2 * pad - k) // stride + 1
        wout = (W + 2 * pad - k) // stride + 1
        if hout < 1 or wout < 1:
            raise ShapeError(f"maxpool2d output would be empty for input {x.shape}")

        xp = (np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)),
                     constant_values=pad_value) if pad else x.data)
        win = np.empty((k * k, C, hout, wout), dtype=xp.dtype)
        for ky in range(k):
            ys = slice(ky, ky + (hout - 1) * stride + 1, stride)
            for kx in range(k):
                xs = slice(kx, kx + (wout - 1) * stride + 1, stride)
                win[ky * k + kx] = xp[:, ys, xs]
        # argmax picks the first maximal cell in row-major window order.
        arg = win.argmax(axis=0)
        out = np.take_along_axis(win, arg[None], axis=0)[0]

        def grad_fn(g):
            dxp = np.zeros_like(xp)
            oy = np.arange(hout)[None, :, None]
            ox = np.arange(wout)[None, None, :]
            iy = oy * stride + arg // k
            ix = ox * stride + arg % k
            ci = np.arange(C)[:, None, None]
            np.add.at(dxp, (np.broadcast_to(ci, arg.shape),
                            np.broadcast_to(iy, arg.shape),
                            np.broadcast_to(ix, arg.shape)), g)
            dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
            return (dx,)
        return self._make(out, (x,), grad_fn)

    def resize_bilinear(self, out_h: int, out_w: int) -> "Tensor":
        x = self
        if x.ndim != 3:
            raise ShapeError(f"resize_bilinear expects (C,H,W), got {x.shape}")
        if out_h < 1 or out_w < 1:
            raise ShapeError("resize_bilinear target size must be >= 1")
        C, H, W = x.shape
        if (out_h, out_w) == (H, W):
            def grad_fn(g):
                return (g,)
            return self._make(x.data.copy(), (x,), grad_fn)

        y0, y1, wy = _bilinear_axis(H, out_h)
        x0, x1, wx = _bilinear_axis(W, out_w)
        wy = wy.astype(x.data.dtype)[None, :, None]
        wx = wx.astype(x.data.dtype)[None, None, :]
        d = x.data
        top = d[:, y0[:, None], x0[None, :]] * (1 - wx) + d[:, y0[:, None], x1[None, :]] * wx
        bot = d[:, y1[:, None], x0[None, :]] * (1 - wx) + d[:, y1[:, None], x1[None, :]] * wx
        out = top * (1 - wy) + bot * wy

        def grad_fn(g):
            dx = np.zeros_like(d)
            ci = np.arange(C)[:, None, None]
            for yi, fy in ((y0, 1 - wy), (y1, wy)):
                yg = np.broadcast_to(yi[None, :, None], g.shape)
                for xi, fx in ((x0, 1 - wx), (x1, wx)):
                    xg = np.broadcast_to(xi[None, None, :], g.shape)
                    cg = np.broadcast_to(ci, g.shape)
                    np.add.at(dx, (cg, yg, xg), g * fy * fx)
            return (dx,)
        return self._make(out, (x,), grad_fn)


def _bilinear_axis(in_size: int, out_size: int):
    """Source indices and lerp weights, align-corners-false convention."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(src)
    w = src - lo
    i0 = np.clip(lo, 0, in_size - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, in_size - 1).astype(np.intp)
    return i0, i1, w


# ----------------------------------------------------------------------
# concat / split

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat requires at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                i != axis and a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape))):
            raise ShapeError(f"concat shape mismatch along axis {axis}: "
                             f"{[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        idx = [slice(None)] * ref.ndim
        parts = []
        for i in range(len(tensors)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)
    return ref._make(out, tuple(tensors), grad_fn)


def split(t: Tensor, n: int, axis: int = 0) -> list[Tensor]:
    axis = axis % t.ndim
    size = t.shape[axis]
    if n < 1 or size % n != 0:
        raise ConfigError(f"cannot split axis of size {size} into {n} equal parts")
    step = size // n
    pieces = []
    for i in range(n):
        idx = [slice(None)] * t.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)
        piece = np.ascontiguousarray(t.data[idx])

        def grad_fn(g, idx=idx):
            full = np.zeros_like(t.data)
            full[idx] = g
            return (full,)
        pieces.append(t._make(piece, (t,), grad_fn))
    return pieces


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (C,H,W) maps along the channel axis."""
    return concat(tensors, axis=0)


def split_channels(t: Tensor, n: int) -> list[Tensor]:
    """Split a (C,H,W) map into n equal channel segments."""
    return split(t, n, axis=0)


# ----------------------------------------------------------------------
# generic elementwise entry point

_UNARY_KINDS = {"relu": Tensor.relu, "sigmoid": Tensor.sigmoid, "neg": Tensor.neg}
_BINARY_KINDS = {"add": Tensor.add, "sub": Tensor.sub,
                 "mul": Tensor.mul, "div": Tensor.div}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch the named elementwise op; see the per-method semantics."""
    if op_kind in _UNARY_KINDS:
        if b is not None:
            raise UsageError(f"{op_kind} takes a single operand")
        return _UNARY_KINDS[op_kind](a)
    if op_kind in _BINARY_KINDS:
        if b is None:
            raise UsageError(f"{op_kind} requires two operands")
        return _BINARY_KINDS[op_kind](a, b)
    if op_kind == "scale":
        if not isinstance(b, (int, float)):
            raise UsageError("scale requires a python scalar")
        return a.scale(b)
    raise UsageError(f"unknown elementwise op {op_kind!r}")
