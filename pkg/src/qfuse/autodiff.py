"""Minimal dense-tensor engine with reverse-mode autodiff.

Everything is float64 and single-threaded per tape. Ops record themselves on
an explicit Tape; backward replays the nodes in exact reverse creation order.
Broadcasting is restricted to scalar-vs-tensor (a size-1 operand against an
arbitrary shape); anything richer is done inside fused ops with hand-derived
backward rules.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A single reduction catches NaN always and Inf unless it cancels to NaN
    # (which is also caught); far cheaper than isfinite().all() on big maps.
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: "Tape | None" = None, nid: int = -1):
        self.data = _as_f64(data)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, nid={self.nid})"


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward):
        self.op = op
        self.inputs = inputs
        # backward(upstream, accumulate) pushes grads to input node ids;
        # None marks a leaf.
        self.backward = backward


class Parameter:
    """Named trainable array. `project` restores invariants after an update."""

    def __init__(self, name: str, value, project: Callable[[np.ndarray], np.ndarray] | None = None):
        self.name = name
        self.value = _as_f64(value)
        self.project = project

    def apply_projection(self) -> None:
        if self.project is not None:
            self.value = _as_f64(self.project(self.value))

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of forward ops; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._bound: dict[int, Tensor] = {}

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node("leaf", (), None))
        return t

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
        _check_finite(data, op)
        ids = tuple(t.nid for t in inputs)
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node(op, ids, backward))
        return t

    def bind(self, param: Parameter) -> Tensor:
        """Leaf tensor for a parameter, memoized so reuse shares gradients."""
        t = self._bound.get(id(param))
        if t is None:
            t = self.leaf(param.value)
            self._bound[id(param)] = t
        return t

    def bound_tensor(self, param: Parameter) -> Tensor | None:
        return self._bound.get(id(param))


class GradStore:
    """Gradients keyed by node id; unreached nodes read as zeros."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return g

    def for_param(self, param: Parameter) -> np.ndarray:
        t = self._tape.bound_tensor(param)
        if t is None:
            return np.zeros_like(param.value)
        return self.get(t)


def backward(tape: Tape, loss: Tensor, seed: np.ndarray | float = 1.0) -> GradStore:
    """Reverse-mode sweep from a scalar loss over the whole tape."""
    if loss.tape is not tape:
        raise ValueError("loss tensor does not belong to this tape")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    grads[loss.nid] = np.broadcast_to(_as_f64(seed), loss.shape).astype(np.float64).copy()

    def accum(nid: int, g) -> None:
        # Stored arrays are never mutated (second contribution allocates),
        # so ops may pass views or shared buffers.
        cur = grads.get(nid)
        if cur is None:
            grads[nid] = g if isinstance(g, np.ndarray) else _as_f64(g)
        else:
            grads[nid] = cur + g

    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        node.backward(g, accum)
    return GradStore(tape, grads)


# ---------------------------------------------------------------------------
# op helpers


def _result(tape: Tape | None, op: str, inputs: Sequence[Tensor], data: np.ndarray, make_backward):
    """Record on the tape when present, else return a detached tensor."""
    if tape is None:
        _check_finite(data, op)
        return Tensor(data)
    return tape.record(op, inputs, data, make_backward())


def _tape_of(*tensors: Tensor) -> Tape | None:
    tp = None
    for t in tensors:
        if t.tape is not None:
            if tp is not None and t.tape is not tp:
                raise ValueError("operands recorded on different tapes")
            tp = t.tape
    return tp


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a broadcast gradient back to the (size-1) operand shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else np.full(shape, np.sum(g))


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not scalar-broadcastable")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    an, bn, ash, bsh = a.nid, b.nid, a.shape, b.shape

    def mk():
        def bwd(g, accum):
            accum(an, _reduce_to(g, ash))
            accum(bn, _reduce_to(g, bsh))
        return bwd

    return _result(_tape_of(a, b), "add", (a, b), out, mk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    an, bn, ash, bsh = a.nid, b.nid, a.shape, b.shape

    def mk():
        def bwd(g, accum):
            accum(an, _reduce_to(g, ash))
            accum(bn, _reduce_to(-g, bsh))
        return bwd

    return _result(_tape_of(a, b), "sub", (a, b), out, mk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    an, bn, ash, bsh = a.nid, b.nid, a.shape, b.shape
    ad, bd = a.data, b.data

    def mk():
        def bwd(g, accum):
            accum(an, _reduce_to(g * bd, ash))
            accum(bn, _reduce_to(g * ad, bsh))
        return bwd

    return _result(_tape_of(a, b), "mul", (a, b), out, mk)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain python scalar (no gradient for c)."""
    c = float(c)
    out = a.data * c
    an = a.nid

    def mk():
        def bwd(g, accum):
            accum(an, g * c)
        return bwd

    return _result(a.tape, "scale", (a,), out, mk)


def add_const(a: Tensor, c: float) -> Tensor:
    out = a.data + float(c)
    an = a.nid

    def mk():
        def bwd(g, accum):
            accum(an, g)
        return bwd

    return _result(a.tape, "add_const", (a,), out, mk)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    an = a.nid
    mask = a.data > 0.0  # subgradient at 0 is 0

    def mk():
        def bwd(g, accum):
            accum(an, g * mask)
        return bwd

    return _result(a.tape, "relu", (a,), out, mk)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)
    an = a.nid

    def mk():
        def bwd(g, accum):
            accum(an, g * out * (1.0 - out))
        return bwd

    return _result(a.tape, "sigmoid", (a,), out, mk)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    an = a.nid
    ad = a.data

    def mk():
        def bwd(g, accum):
            accum(an, g * 2.0 * ad)
        return bwd

    return _result(a.tape, "square", (a,), out, mk)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "scale": scale,
}


def forward_elementwise(kind: str, *args):
    """Dispatch by op name; mirrors the engine's elementwise op set."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural / linear ops


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x[B,N] @ w[M,N]^T + b[M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x[B,N], w[M,N], b[M]")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data.T + b.data
    xn, wn, bn = x.nid, w.nid, b.nid
    xd, wd = x.data, w.data

    def mk():
        def bwd(g, accum):
            accum(xn, g @ wd)
            accum(wn, g.T @ xd)
            accum(bn, g.sum(axis=0))
        return bwd

    return _result(_tape_of(x, w, b), "dense", (x, w, b), out, mk)


def _im2col2d(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded input flattened to (B*Ho*Wo, C*k*k)."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, c, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(b * ho * wo, c * k * k)  # forces one contiguous copy


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation, k in {1,3}, stride in {1,2}; k=3 uses zero pad 1."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x[B,C,H,W], w[O,C,k,k]")
    bsz, c, h, wdt = x.shape
    o, cw, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"kernel must be square with k in {{1,3}}, got {k}x{k2}")
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cw}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if h < k or wdt < k:
        raise ValueError("spatial dims smaller than kernel")
    pad = 1 if k == 3 else 0
    hp, wp = h + 2 * pad, wdt + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col2d(xp, k, stride, ho, wo)             # (B*Ho*Wo, C*k*k)
    wm = w.data.reshape(o, c * k * k)
    out2d = cols @ wm.T                                 # (B*Ho*Wo, O)
    out = np.ascontiguousarray(out2d.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2))
    xn, wn = x.nid, w.nid

    def mk():
        def bwd(g, accum):
            g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, o)
            accum(wn, (g2d.T @ cols).reshape(o, c, k, k))
            dcols = (g2d @ wm).reshape(bsz, ho, wo, c, k, k)
            dxp = np.zeros((bsz, hp, wp, c))            # NHWC for contiguous adds
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += (
                        dcols[:, :, :, :, ki, kj]
                    )
            dx = dxp[:, pad:hp - pad, pad:wp - pad, :] if pad else dxp
            accum(xn, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
        return bwd

    return _result(_tape_of(x, w), "conv2d", (x, w), out, mk)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"non-channel dims differ: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]
    an, bn = a.nid, b.nid

    def mk():
        def bwd(g, accum):
            accum(an, np.ascontiguousarray(g[:, :ca]))
            accum(bn, np.ascontiguousarray(g[:, ca:]))
        return bwd

    return _result(_tape_of(a, b), "concat_channels", (a, b), out, mk)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("upsample_nearest2x expects a 4-D tensor")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    xn = x.nid
    b, c, h, w = x.shape

    def mk():
        def bwd(g, accum):
            accum(xn, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))
        return bwd

    return _result(x.tape, "upsample_nearest2x", (x,), out, mk)


# ---------------------------------------------------------------------------
# reductions


def _axes_tuple(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % x.data.ndim for a in axes))
    if len(axes) == 0:
        raise ValueError("empty reduction axis set")
    return axes


def _keepdims_shape(shape: tuple[int, ...], axes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _axes_tuple(x, axes)
    out = x.data.sum(axis=axes)
    xn = x.nid
    kshape = _keepdims_shape(x.shape, axes)
    xshape = x.shape

    def mk():
        def bwd(g, accum):
            accum(xn, np.broadcast_to(g.reshape(kshape), xshape))
        return bwd

    return _result(x.tape, "reduce_sum", (x,), out, mk)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _axes_tuple(x, axes)
    out = x.data.mean(axis=axes)
    xn = x.nid
    kshape = _keepdims_shape(x.shape, axes)
    xshape = x.shape
    count = np.prod([x.shape[a] for a in axes])

    def mk():
        def bwd(g, accum):
            accum(xn, np.broadcast_to((g / count).reshape(kshape), xshape))
        return bwd

    return _result(x.tape, "reduce_mean", (x,), out, mk)


def reduce_stats(x: Tensor, axes=None) -> tuple[Tensor, Tensor]:
    """Population mean and variance over the axis set, both differentiable.

    d var / d x_i = 2 (x_i - mean) / N exactly, since the mean-path terms
    cancel against sum(x - mean) = 0.
    """
    axes = _axes_tuple(x, axes)
    mean = reduce_mean(x, axes)
    kshape = _keepdims_shape(x.shape, axes)
    count = np.prod([x.shape[a] for a in axes])
    centered = x.data - x.data.mean(axis=axes).reshape(kshape)
    var_data = (centered * centered).mean(axis=axes)
    xn = x.nid
    xshape = x.shape

    def mk():
        def bwd(g, accum):
            accum(xn, (2.0 / count) * centered * np.broadcast_to(g.reshape(kshape), xshape))
        return bwd

    var = _result(x.tape, "reduce_var", (x,), var_data, mk)
    return mean, var


# ---------------------------------------------------------------------------
# classification head ops


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise ValueError("softmax expects [B,K] logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    ln = logits.nid

    def mk():
        def bwd(g, accum):
            dot = (g * p).sum(axis=1, keepdims=True)
            accum(ln, p * (g - dot))
        return bwd

    return _result(logits.tape, "softmax", (logits,), p, mk)


def nll_mean(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under given probabilities."""
    if probs.data.ndim != 2:
        raise ValueError("nll_mean expects [B,K] probabilities")
    rows = probs.data.sum(axis=1)
    if not np.allclose(rows, 1.0, atol=1e-6):
        raise ValueError("class probabilities are not normalized")
    labels = np.asarray(labels, dtype=np.int64)
    b = probs.shape[0]
    picked = probs.data[np.arange(b), labels]
    out = np.array(-np.log(np.maximum(picked, 1e-300)).mean())
    pn = probs.nid
    pshape = probs.shape

    def mk():
        def bwd(g, accum):
            d = np.zeros(pshape)
            d[np.arange(b), labels] = -1.0 / (np.maximum(picked, 1e-300) * b)
            accum(pn, d * g)
        return bwd

    return _result(probs.tape, "nll_mean", (probs,), out, mk)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, element by element."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_f64(x).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g
