"""Dense NCHW tensor core with reverse-mode differentiation over a tape.

Values are numpy arrays (float32 in production; float64 is allowed so that
finite-difference oracles can run a higher-precision shadow of the same
code).  Operations are module-level functions.  If any operand is attached
to a Tape, the op records a node with a backward closure; otherwise it is a
plain eager computation, which keeps inference rollouts tape-free.

There is no implicit broadcasting anywhere except the conv/norm bias and
affine parameters over channels: shape mismatches raise immediately.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from . import _convkernels as ck

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class PaddingMode(enum.Enum):
    """Boundary rule for stride-1 'same' convolutions."""

    PERIODIC = "periodic"
    ZERO = "zero"


class ShapeError(ValueError):
    pass


class _Node:
    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op: str, parents: tuple[int, ...], bwd: Optional[Callable]):
        self.op = op
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Append-only record of operations; node order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: list[Optional[np.ndarray]] = []

    def leaf(self, data, name: str = "leaf") -> "Tensor":
        t = Tensor(data)
        t.tape = self
        t.node = self._push(name, (), None)
        return t

    def _push(self, op: str, parents: tuple[int, ...], bwd) -> int:
        self.nodes.append(_Node(op, parents, bwd))
        return len(self.nodes) - 1


class Tensor:
    """A numpy array plus an optional handle onto a differentiation tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.tape: Optional[Tape] = None
        self.node: int = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def constant(data) -> Tensor:
    return Tensor(data)


def _common_tape(tensors: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _result(op: str, out: np.ndarray, inputs: Sequence[Tensor],
            make_bwd: Callable[[list[bool]], Callable]) -> Tensor:
    """Wrap `out`; if any input is on a tape, record a node.

    `make_bwd(need)` receives a per-input bool list (True where the input is
    on the tape) and returns a closure mapping grad_out to a list of grads
    for exactly the on-tape inputs, in order.
    """
    tape = _common_tape(inputs)
    res = Tensor(out)
    if tape is not None:
        need = [t.tape is not None for t in inputs]
        parents = tuple(t.node for t in inputs if t.tape is not None)
        res.tape = tape
        res.node = tape._push(op, parents, make_bwd(need))
    return res


def backward(tape: Tape, root: Tensor) -> list[Optional[np.ndarray]]:
    """Reverse sweep from a scalar root; returns one gradient slot per node.

    The root's own gradient is seeded with ones, leaves keep their
    accumulated gradients, and nodes the root does not depend on stay None.
    """
    if root.tape is not tape:
        raise ValueError("root tensor is not on this tape")
    if root.data.size != 1:
        raise ValueError(f"root must be scalar, got shape {root.data.shape}")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[root.node] = np.ones_like(root.data)
    for i in range(root.node, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.bwd is None:
            continue
        for pid, pg in zip(node.parents, node.bwd(g)):
            if pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    tape.gradients = grads
    return grads


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: PaddingMode = PaddingMode.PERIODIC, groups: int = 1) -> Tensor:
    """2D convolution, NCHW.

    stride 1 keeps the spatial size (odd kernel, 'same' padding via `pad`);
    stride 2 with a 2x2 kernel and no padding halves it (learned pooling).
    Weight layout (C_out, C_in/groups, k, k); bias is always added.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight")
    n, c_in, h, w = xd.shape
    c_out, c_in_g, kh, kw = wd.shape
    if kh != kw:
        raise ShapeError("only square kernels supported")
    k = kh
    if stride == 1:
        if k % 2 != 1:
            raise ShapeError(f"stride-1 conv needs an odd kernel, got {k}")
        padding = (k - 1) // 2
    elif stride == 2:
        if k != 2:
            raise ShapeError(f"stride-2 conv needs a 2x2 kernel, got {k}")
        if h % 2 or w % 2:
            raise ShapeError(f"stride-2 conv needs even spatial size, got {h}x{w}")
        padding = 0
    else:
        raise ShapeError(f"unsupported stride {stride}")
    if c_in % groups or c_out % groups:
        raise ShapeError("channel counts must be divisible by groups")
    if c_in_g * groups != c_in:
        raise ShapeError(f"weight expects {c_in_g * groups} input channels, got {c_in}")
    if bd.shape != (c_out,):
        raise ShapeError("bias must have shape (C_out,)")

    ho, wo = h // stride, w // stride
    mode = ck.WRAP if pad is PaddingMode.PERIODIC else ck.ZERO
    p_out = n * ho * wo
    g = groups

    cols = ck.im2col(xd, k, stride, padding, ho, wo, mode, "conv_f")
    cols3 = cols.reshape(g, (c_in // g) * k * k, p_out)
    w3 = wd.reshape(g, c_out // g, (c_in // g) * k * k)
    out3 = ck.workspace("conv_o", (g, c_out // g, p_out), xd.dtype)
    np.matmul(w3, cols3, out=out3)
    out = out3.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3) + bd.reshape(1, c_out, 1, 1)

    def make_bwd(need):
        def bwd(gout: np.ndarray):
            g2 = ck.workspace("conv_g", (c_out, n * ho * wo), gout.dtype)
            np.copyto(g2.reshape(c_out, n, ho, wo), gout.transpose(1, 0, 2, 3))
            g3 = g2.reshape(g, c_out // g, p_out)
            cols_b = ck.im2col(xd, k, stride, padding, ho, wo, mode, "conv_bc")
            cb3 = cols_b.reshape(g, (c_in // g) * k * k, p_out)
            grad_w = np.matmul(g3, cb3.transpose(0, 2, 1)).reshape(wd.shape)
            grads = []
            if need[0]:
                gc = ck.workspace("conv_gc", (g, (c_in // g) * k * k, p_out), gout.dtype)
                np.matmul(w3.transpose(0, 2, 1), g3, out=gc)
                grad_x = np.zeros_like(xd)
                ck.col2im_add(gc.reshape(c_in * k * k, p_out), grad_x,
                              k, stride, padding, ho, wo, mode)
                grads.append(grad_x)
            grads.append(grad_w)
            grads.append(gout.sum(axis=(0, 2, 3)))
            return grads
        return bwd

    return _result("conv2d", out, (x, weight, bias), make_bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2: doubles H and W.

    Weight layout (C_in, C_out, 2, 2).  The forward map is the exact adjoint
    of the input-gradient of a stride-2 2x2 conv2d with the same weight.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (2, 2):
        raise ShapeError("conv_transpose2d expects rank-4 input and (Ci,Co,2,2) weight")
    n, c_in, h, w = xd.shape
    if wd.shape[0] != c_in:
        raise ShapeError(f"weight expects {wd.shape[0]} input channels, got {c_in}")
    c_out = wd.shape[1]
    if bd.shape != (c_out,):
        raise ShapeError("bias must have shape (C_out,)")

    t = np.tensordot(xd, wd, axes=([1], [0]))            # (N,H,W,Co,2,2)
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w).copy()
    out += bd.reshape(1, c_out, 1, 1)

    def make_bwd(need):
        def bwd(gout: np.ndarray):
            gr = gout.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
            grads = []
            if need[0]:
                gx = np.tensordot(gr, wd, axes=([3, 4, 5], [1, 2, 3]))
                grads.append(np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
            grads.append(np.tensordot(xd, gr, axes=([0, 2, 3], [0, 1, 2])))
            grads.append(gout.sum(axis=(0, 2, 3)))
            return grads
        return bwd

    return _result("conv_transpose2d", out, (x, weight, bias), make_bwd)


# ---------------------------------------------------------------------------
# pooling


def _windows4(xd: np.ndarray):
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even spatial size, got {h}x{w}")
    # window elements ordered row-major: (0,0),(0,1),(1,0),(1,1)
    return xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
             .reshape(n, c, h // 2, w // 2, 4)


def _unwindow4(z: np.ndarray, shape):
    n, c, h, w = shape
    return np.ascontiguousarray(
        z.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h, w)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first row-major argmax per window."""
    xd = x.data
    win = _windows4(xd)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def make_bwd(need):
        def bwd(gout):
            z = np.zeros(win.shape, dtype=gout.dtype)
            np.put_along_axis(z, idx[..., None], gout[..., None], axis=-1)
            return [_unwindow4(z, xd.shape)]
        return bwd

    return _result("max_pool2", out, (x,), make_bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling; gradient spreads evenly over each window."""
    xd = x.data
    win = _windows4(xd)
    out = win.mean(axis=-1)

    def make_bwd(need):
        def bwd(gout):
            z = np.broadcast_to((gout * 0.25)[..., None], win.shape)
            return [_unwindow4(z, xd.shape)]
        return bwd

    return _result("avg_pool2", out, (x,), make_bwd)


# ---------------------------------------------------------------------------
# pointwise and normalization


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    out = xd * cdf

    def make_bwd(need):
        def bwd(gout):
            pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
            return [gout * (cdf + xd * pdf)]
        return bwd

    return _result("gelu", out, (x,), make_bwd)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization over (C/G, H, W), then affine."""
    xd = x.data
    n, c, h, w = xd.shape
    if c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("gamma/beta must have shape (C,)")
    xg = xd.reshape(n, num_groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = ((xg - mu) * r).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def make_bwd(need):
        def bwd(gout):
            dxhat = (gout * gamma.data.reshape(1, c, 1, 1)).reshape(n, num_groups, -1)
            xh = xhat.reshape(n, num_groups, -1)
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
            grads = []
            if need[0]:
                dx = (r * (dxhat - m1 - xh * m2)).reshape(n, c, h, w)
                grads.append(dx)
            grads.append((gout * xhat).sum(axis=(0, 2, 3)))
            grads.append(gout.sum(axis=(0, 2, 3)))
            return grads
        return bwd

    return _result("group_norm", out, (x, gamma, beta), make_bwd)


# ---------------------------------------------------------------------------
# structure


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all inputs share N, H, W."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].data.shape
    for t in xs[1:]:
        tn, _, th, tw = t.data.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError("concat_channels inputs disagree on N/H/W")
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.data.shape[1] for t in xs]

    def make_bwd(need):
        bounds = np.cumsum([0] + sizes)

        def bwd(gout):
            return [gout[:, bounds[i]:bounds[i + 1]]
                    for i in range(len(sizes)) if need[i]]
        return bwd

    return _result("concat_channels", out, tuple(xs), make_bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add shape mismatch: {x.data.shape} vs {y.data.shape}")
    out = x.data + y.data

    def make_bwd(need):
        def bwd(gout):
            return [gout for flag in need if flag]
        return bwd

    return _result("add", out, (x, y), make_bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mul shape mismatch: {x.data.shape} vs {y.data.shape}")
    out = x.data * y.data
    xd, yd = x.data, y.data

    def make_bwd(need):
        def bwd(gout):
            grads = []
            if need[0]:
                grads.append(gout * yd)
            if need[1]:
                grads.append(gout * xd)
            return grads
        return bwd

    return _result("mul", out, (x, y), make_bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    out = x.data * x.data.dtype.type(c)

    def make_bwd(need):
        def bwd(gout):
            return [gout * gout.dtype.type(c)]
        return bwd

    return _result("scale", out, (x,), make_bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    xd = x.data
    out = np.asarray(xd.sum(), dtype=xd.dtype)

    def make_bwd(need):
        def bwd(gout):
            return [np.broadcast_to(gout, xd.shape)]
        return bwd

    return _result("sum", out, (x,), make_bwd)


# ---------------------------------------------------------------------------
# losses


def scaled_l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of the per-sample field-averaged relative L2 error.

    For each sample, each field's ||pred - target||_2 over space is divided
    by the field's ||target||_2, and the ratios are averaged over fields.
    """
    pd = pred.data
    t = np.asarray(target, dtype=pd.dtype)
    if pd.shape != t.shape:
        raise ShapeError(f"loss shape mismatch: {pd.shape} vs {t.shape}")
    n, m = pd.shape[0], pd.shape[1]
    d = pd - t
    num = np.sqrt((d * d).sum(axis=(2, 3)))             # (N, M)
    den = np.sqrt((t * t).sum(axis=(2, 3)))
    if np.any(den == 0):
        raise ValueError("scaled L2 loss undefined for a zero-norm target field")
    out = np.asarray((num / den).mean(), dtype=pd.dtype)

    def make_bwd(need):
        def bwd(gout):
            safe = np.where(num > 0, num, 1.0)
            coef = gout / (n * m * safe * den)
            coef = np.where(num > 0, coef, 0.0)
            return [d * coef[:, :, None, None]]
        return bwd

    return _result("scaled_l2_loss", out, (pred,), make_bwd)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared difference over all elements."""
    pd = pred.data
    t = np.asarray(target, dtype=pd.dtype)
    if pd.shape != t.shape:
        raise ShapeError(f"loss shape mismatch: {pd.shape} vs {t.shape}")
    d = pd - t
    out = np.asarray((d * d).mean(), dtype=pd.dtype)

    def make_bwd(need):
        def bwd(gout):
            return [d * (2.0 * gout / d.size)]
        return bwd

    return _result("mse_loss", out, (pred,), make_bwd)
