"""Dense tensors, differentiable primitives, and reverse-mode backprop.

Layout convention: image tensors are batch x height x width x channels,
vectors are batch x features, all row-major. Training runs in float32;
the gradient checker drives the same ops in float64.

Ops executed inside a `with Tape():` block are recorded; `backward(loss,
tape)` then walks the record in reverse and fills the `.grad` slot of
every tensor that has `requires_grad` set. Outside a tape, ops are plain
forward computations.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError, SpatialCollapseError
from .rng import Rng

MAX_RANK = 4
CE_EPS = 1e-7


class Tensor:
    """Dense float array of rank <= 4 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d stays 0-d, unlike ascontiguousarray
            arr = np.ascontiguousarray(arr)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatchError(f"rank {arr.ndim} exceeds max rank {MAX_RANK}")
        if any(d < 1 for d in arr.shape):
            raise ShapeMismatchError(f"shape {arr.shape} has a zero-sized dimension")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor contains NaN or Inf")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn", "recompute_fn")

    def __init__(self, op, inputs, output, backward_fn, recompute_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.recompute_fn = recompute_fn


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered op record; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def replay(self) -> None:
        """Recompute every node's output from its inputs and saved context.

        With unchanged leaf data the refreshed outputs are bit-identical to
        the original forward pass (stochastic ops reuse their saved masks).
        """
        for node in self.nodes:
            node.output.data = node.recompute_fn()


def _record(op: str, inputs: tuple, output: Tensor, backward_fn, recompute_fn) -> None:
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].nodes.append(TapeNode(op, inputs, output, backward_fn, recompute_fn))


def _out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    return Tensor(data, requires_grad=any(t.requires_grad for t in inputs), dtype=data.dtype)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeMismatchError(f"mixed dtypes {sorted(map(str, dtypes))} in one op")


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return before, total - before


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}: output would be empty"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    return (pt, pb, pl, pr), (oh, ow)


def _conv2d_cols(x: np.ndarray, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: N x OH x OW x C x kh x kw -> rows ordered (kh, kw, C) to match
    # the (kh, kw, Cin, Cout) weight layout flattened row-major
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, -1)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution: x[N,H,W,Cin] * w[kh,kw,Cin,Cout] + b[Cout].

    Each output element is the sliding dot product of the kernel with the
    input window plus the output channel's bias.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeMismatchError(
            f"conv2d expects 4d input, 4d weights, 1d bias; got {x.shape}, {w.shape}, {b.shape}"
        )
    _check_same_dtype(x, w, b)
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeMismatchError(
            f"input channels {x.shape} do not match weight channels {w.shape}"
        )
    if b.shape != (cout,):
        raise ShapeMismatchError(f"bias {b.shape} does not match output channels {cout}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pads, (oh, ow) = _conv_geometry(h, wd, kh, kw, stride, padding)

    def run(xd, wd_, bd):
        cols = _conv2d_cols(xd, kh, kw, stride, pads)
        out = cols @ wd_.reshape(-1, cout) + bd
        return out.reshape(n, oh, ow, cout), cols

    out_data, cols = run(x.data, w.data, b.data)
    out = _out(out_data, x, w, b)

    def backward_fn(g: np.ndarray):
        gm = g.reshape(-1, cout)
        dw = (cols.T @ gm).reshape(w.shape)
        db = gm.sum(axis=0)
        dcols = (gm @ w.data.reshape(-1, cout).T).reshape(n, oh, ow, kh, kw, cin)
        pt, pb, pl, pr = pads
        dxp = np.zeros((n, h + pt + pb, wd + pl + pr, cin), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + (oh - 1) * stride + 1 : stride,
                    j : j + (ow - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt : pt + h, pl : pl + wd, :]
        return dx, dw, db

    _record("conv2d", (x, w, b), out, backward_fn,
            lambda: run(x.data, w.data, b.data)[0])
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0), x)
    mask = x.data > 0  # grad at exactly 0 is 0

    def backward_fn(g):
        return (g * mask,)

    _record("relu", (x,), out, backward_fn, lambda: np.maximum(x.data, 0))
    return out


def maxpool2d(x: Tensor, k: int = 2, s: int = 2) -> Tensor:
    """Max over k x k windows with stride s; N,H,W,C layout.

    Backward routes the upstream gradient to the window's argmax only;
    ties go to the first position in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects a 4d tensor, got {x.shape}")
    n, h, w, c = x.shape
    if h < k or w < k:
        raise SpatialCollapseError(
            f"pool window {k}x{k} exceeds spatial extent {h}x{w}"
        )
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1

    def run(xd):
        win = sliding_window_view(xd, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = np.ascontiguousarray(win).reshape(n, oh, ow, c, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, idx

    out_data, idx = run(x.data)
    out = _out(out_data, x)

    def backward_fn(g):
        di, dj = np.divmod(idx, k)
        rows = np.arange(oh)[None, :, None, None] * s + di
        cols = np.arange(ow)[None, None, :, None] * s + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(dx, (nn, rows, cols, cc), g)
        return (dx,)

    _record("maxpool2d", (x,), out, backward_fn, lambda: run(x.data)[0])
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[N,Din] @ w[Din,Dout] + b[Dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatchError(
            f"dense expects 2d input, 2d weights, 1d bias; got {x.shape}, {w.shape}, {b.shape}"
        )
    _check_same_dtype(x, w, b)
    if x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"dense dimensions disagree: {x.shape} @ {w.shape} + {b.shape}")
    out = _out(x.data @ w.data + b.data, x, w, b)

    def backward_fn(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    _record("dense", (x, w, b), out, backward_fn, lambda: x.data @ w.data + b.data)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, computed branch-wise so |x| > 30 cannot overflow."""

    def run(xd):
        z = np.exp(-np.abs(xd))
        return np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)

    out_data = run(x.data)
    out = _out(out_data, x)

    def backward_fn(g):
        return (g * out_data * (1.0 - out_data),)

    _record("sigmoid", (x,), out, backward_fn, lambda: run(x.data))
    return out


def softmax(x: Tensor) -> Tensor:
    """Row softmax over x[N,C] with max-subtraction for stability."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeMismatchError(f"softmax expects [N,C] with C >= 2, got {x.shape}")

    def run(xd):
        e = np.exp(xd - xd.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    out_data = run(x.data)
    out = _out(out_data, x)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    _record("softmax", (x,), out, backward_fn, lambda: run(x.data))
    return out


def dropout(x: Tensor, p: float, mode: str, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode is the identity (returns x itself). The mask is saved, so
    backward and tape replay reuse the exact draw.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    keep = (rng.gen.random(x.shape) >= p).astype(x.data.dtype)
    scale = keep / np.asarray(1.0 - p, dtype=x.data.dtype)
    out = _out(x.data * scale, x)

    def backward_fn(g):
        return (g * scale,)

    _record("dropout", (x,), out, backward_fn, lambda: x.data * scale)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeMismatchError(f"cannot reshape {x.shape} to {shape}")
    out = _out(x.data.reshape(shape), x)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    _record("reshape", (x,), out, backward_fn, lambda: x.data.reshape(shape))
    return out


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of all non-batch dimensions."""
    if x.data.ndim < 2:
        raise ShapeMismatchError(f"flatten expects a batched tensor, got {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"add shapes differ: {x.shape} vs {y.shape}")
    _check_same_dtype(x, y)
    out = _out(x.data + y.data, x, y)

    def backward_fn(g):
        return g, g

    _record("add", (x, y), out, backward_fn, lambda: x.data + y.data)
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"mul shapes differ: {x.shape} vs {y.shape}")
    _check_same_dtype(x, y)
    out = _out(x.data * y.data, x, y)

    def backward_fn(g):
        return g * y.data, g * x.data

    _record("mul", (x, y), out, backward_fn, lambda: x.data * y.data)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum(), dtype=x.data.dtype), x)

    def backward_fn(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    _record("sum", (x,), out, backward_fn, lambda: np.asarray(x.data.sum(), dtype=x.data.dtype))
    return out


# ---------------------------------------------------------------------------
# losses


def _check_one_hot(labels: Tensor, shape) -> None:
    ld = labels.data
    if ld.shape != shape:
        raise ShapeMismatchError(f"labels {ld.shape} do not match probabilities {shape}")
    if not (np.all((ld == 0) | (ld == 1)) and np.all(ld.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")


def cross_entropy(probs: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of -sum(y * ln p), with p clamped to [eps, 1-eps]."""
    if probs.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects [N,C] probabilities, got {probs.shape}")
    _check_one_hot(labels, probs.shape)
    n = probs.shape[0]
    pc = np.clip(probs.data, CE_EPS, 1.0 - CE_EPS)
    loss = -(labels.data * np.log(pc)).sum() / n
    out = _out(np.asarray(loss, dtype=probs.data.dtype), probs)
    inside = (probs.data > CE_EPS) & (probs.data < 1.0 - CE_EPS)

    def backward_fn(g):
        return (g * (-labels.data / pc) * inside / n, None)

    _record("cross_entropy", (probs, labels), out, backward_fn,
            lambda: np.asarray(
                -(labels.data * np.log(np.clip(probs.data, CE_EPS, 1.0 - CE_EPS))).sum() / n,
                dtype=probs.data.dtype))
    return out


def binary_cross_entropy(probs: Tensor, labels: Tensor) -> Tensor:
    """Per-unit binary cross-entropy averaged over batch and units.

    This is the training loss for the two-unit sigmoid head, where each
    output unit is its own Bernoulli probability.
    """
    if probs.data.ndim != 2:
        raise ShapeMismatchError(f"binary_cross_entropy expects [N,C], got {probs.shape}")
    _check_one_hot(labels, probs.shape)
    n, c = probs.shape
    pc = np.clip(probs.data, CE_EPS, 1.0 - CE_EPS)
    y = labels.data
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / (n * c)
    out = _out(np.asarray(loss, dtype=probs.data.dtype), probs)
    inside = (probs.data > CE_EPS) & (probs.data < 1.0 - CE_EPS)

    def backward_fn(g):
        return (g * (-y / pc + (1.0 - y) / (1.0 - pc)) * inside / (n * c), None)

    _record("binary_cross_entropy", (probs, labels), out, backward_fn,
            lambda: np.asarray(
                -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / (n * c),
                dtype=probs.data.dtype))
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, tape: Tape) -> None:
    """Backpropagate d(loss)/d(tensor) into every requires_grad tensor on the tape.

    Overwrites each tensor's `.grad`; tensors the loss does not reach get
    a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("cannot backpropagate through an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = ig if acc is None else acc + ig

    seen: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in (*node.inputs, node.output):
            seen[id(t)] = t
    for tid, t in seen.items():
        if t.requires_grad:
            g = grads.get(tid)
            t.grad = np.zeros_like(t.data) if g is None else g
