"""
Dense Tensor Engine
float32 numpy tensors with tape-based reverse-mode automatic differentiation

Every numeric operation of the backbone is built from the ops in this module.
An op records a node on the active Tape (entered with ``with Tape() as tape:``)
when any of its inputs requires grad; with no tape active it only computes.
"""
import math
import threading
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float32

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an op's contract"""


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


class Tensor:
    """
    n-dimensional float32 array with an optional gradient buffer
    """

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d losses to 1-d
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray):
        """Add into .grad (grads accumulate until explicitly zeroed)"""
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = grad.astype(DTYPE, copy=True)
        else:
            self.grad = self.grad + grad.astype(DTYPE, copy=False)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """
    Ordered record of the ops run while the tape is active

    A tape belongs to the thread that entered it; entering a second tape on
    the same thread shadows the first until it exits.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._outputs = set()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.nodes.append(_Node(inputs, output, backward))
        self._outputs.add(id(output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack("tapes").pop()
        return False


def active_tape() -> Optional[Tape]:
    stack = _stack("tapes")
    return stack[-1] if stack else None


class FlopCounter:
    """
    Counts floating-point operations of matmul and conv2d (2 per multiply-add)
    while active
    """

    def __init__(self):
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _stack("counters").append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack("counters").pop()
        return False


def _count_flops(flops: int):
    for counter in _stack("counters"):
        counter.flops += int(flops)


def _result(inputs: Sequence[Tensor], data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Tape):
    """
    Populate .grad of every requires_grad leaf reachable from loss

    Nodes are replayed in reverse recording order. Leaves are tensors the tape
    did not produce; their grads accumulate across calls.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced under this tape")

    grads = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        if grad_out is None:
            continue
        input_grads = node.backward(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=DTYPE)
            if tape.produced(tensor):
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
            else:
                tensor.accumulate_grad(grad)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(tuple(shape))

    def _backward(g):
        return (g.reshape(x.shape),)

    return _result((x,), data, _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation of {x.ndim} dims")
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def _backward(g):
        return (g.transpose(inverse),)

    return _result((x,), data, _backward)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise sum; b may also be a trailing-shape bias (e.g. [D] added to [..., D])
    """
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))

    def _backward(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result((a, b), a.data + b.data, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = DTYPE(factor)

    def _backward(g):
        return (g * factor,)

    return _result((x,), x.data * factor, _backward)


def sum_all(x: Tensor) -> Tensor:
    def _backward(g):
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _result((x,), np.asarray(x.data.sum(dtype=DTYPE)), _backward)


def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    count = x.shape[axis]

    def _backward(g):
        expanded = np.expand_dims(g, axis) / DTYPE(count)
        return (np.broadcast_to(expanded, x.shape).astype(DTYPE),)

    return _result((x,), x.data.mean(axis=axis, dtype=DTYPE), _backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    v = x.data
    inner = DTYPE(_GELU_C) * (v + DTYPE(0.044715) * v ** 3)
    t = np.tanh(inner)
    data = DTYPE(0.5) * v * (DTYPE(1.0) + t)

    def _backward(g):
        d_inner = DTYPE(_GELU_C) * (DTYPE(1.0) + DTYPE(3 * 0.044715) * v ** 2)
        deriv = DTYPE(0.5) * (DTYPE(1.0) + t) + DTYPE(0.5) * v * (DTYPE(1.0) - t ** 2) * d_inner
        return (g * deriv,)

    return _result((x,), data, _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result((x,), y, _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize over the last axis to zero mean / unit variance, then scale-shift
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be [{d}], got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    rstd = DTYPE(1.0) / np.sqrt(var + DTYPE(eps))
    xhat = centered * rstd
    data = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def _backward(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result((x, gamma, beta), data, _backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = DTYPE(diff.size)

    def _backward(g):
        d = DTYPE(2.0) * diff / n * g
        return d, -d

    return _result((pred, target), np.asarray((diff ** 2).mean(dtype=DTYPE)), _backward)


# ---------------------------------------------------------------------------
# matmul / conv
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes

    b is either a plain [k, n] matrix (shared across a's leading axes) or
    carries the same leading axes as a.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)
    _count_flops(2 * data.size * a.shape[-1])

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result((a, b), data, _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W (+ b), W stored as [in, out]"""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # N x C x Ho x Wo x kh x kw view into the padded input
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """
    Grouped 2-D cross-correlation, NCHW input, weight [O, C/groups, kh, kw]
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, c_per_group, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels {c} -> {o} not divisible into {groups} groups")
    if c_per_group != c // groups:
        raise ShapeError(f"weight expects {c_per_group} channels per group, input gives {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must be [{o}], got {bias.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is not positive for input {h}x{w}")
    _count_flops(2 * n * o * ho * wo * c_per_group * kh * kw)

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    depthwise = groups == c and o == c

    if depthwise:
        data = _depthwise_forward(xp, weight.data, stride, ho, wo)
    else:
        data = np.empty((n, o, ho, wo), dtype=DTYPE)
        o_per_group = o // groups
        for gi in range(groups):
            cs = slice(gi * c_per_group, (gi + 1) * c_per_group)
            os_ = slice(gi * o_per_group, (gi + 1) * o_per_group)
            cols = _windows(xp[:, cs], kh, kw, stride, ho, wo)
            cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
            res = cols @ weight.data[os_].reshape(o_per_group, -1).T
            data[:, os_] = res.reshape(n, ho, wo, o_per_group).transpose(0, 3, 1, 2)
    if bias is not None:
        data += bias.data[None, :, None, None]

    def _backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    rows = slice(i, i + stride * (ho - 1) + 1, stride)
                    cols_ = slice(j, j + stride * (wo - 1) + 1, stride)
                    dxp[:, :, rows, cols_] += g * weight.data[None, :, 0, i, j, None, None]
                    dw[:, 0, i, j] = (g * xp[:, :, rows, cols_]).sum(axis=(0, 2, 3))
        else:
            o_per_group = o // groups
            for gi in range(groups):
                cs = slice(gi * c_per_group, (gi + 1) * c_per_group)
                os_ = slice(gi * o_per_group, (gi + 1) * o_per_group)
                g_flat = g[:, os_].transpose(0, 2, 3, 1).reshape(n * ho * wo, o_per_group)
                cols = _windows(xp[:, cs], kh, kw, stride, ho, wo)
                cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
                dw[os_] = (g_flat.T @ cols).reshape(o_per_group, c_per_group, kh, kw)
                dcols = (g_flat @ weight.data[os_].reshape(o_per_group, -1))
                dcols = dcols.reshape(n, ho, wo, c_per_group, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        rows = slice(i, i + stride * (ho - 1) + 1, stride)
                        cols_ = slice(j, j + stride * (wo - 1) + 1, stride)
                        dxp[:, cs, rows, cols_] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(db)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(inputs, data, _backward)


def _depthwise_forward(xp: np.ndarray, weight: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    _, _, kh, kw = weight.shape
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += window * weight[None, :, 0, i, j, None, None]
    return out
