"""Dense tensors with a recording tape for reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array. Primitives are applied
through :func:`apply_primitive`; when a :class:`Tape` is active every
application is appended to it, and :func:`backward` walks the tape in
reverse to produce gradients for the leaves.

Only float32 and float64 are supported. The dtype of a tensor is its
precision flag and every primitive preserves it; mixing the two in one
primitive is an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericFault, ShapeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """An immutable n-d array that can take part in a recorded computation."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def precision(self) -> int:
        return 32 if self.data.dtype == np.float32 else 64

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, f{self.precision})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: Tensor
    saved: Any = None
    attrs: dict = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager; tensors that enter a recorded primitive without
    being produced on this tape become leaves.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}
        self._objs: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop(len(_ACTIVE) - 1 - _ACTIVE[::-1].index(self))
        return False

    def leaf(self, t: Tensor) -> int:
        key = id(t)
        if key in self._index:
            return self._index[key]
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), t))
        self._index[key] = nid
        self._objs.append(t)
        return nid

    def node_id(self, t: Tensor) -> int:
        nid = self._index.get(id(t))
        if nid is None:
            raise ContractError(f"{t!r} is not recorded on this tape")
        return nid

    def _record(self, kind, inputs, out, saved, attrs) -> None:
        ids = tuple(self.leaf(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, ids, out, saved, attrs))
        self._index[id(out)] = nid
        self._objs.append(out)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def replay(self) -> bool:
        """Recompute every non-leaf node from its inputs; True iff all match bitwise."""
        for node in self.nodes:
            if node.kind == "leaf":
                continue
            fwd = _PRIMS[node.kind][0]
            arrays = [self.nodes[i].output.data for i in node.inputs]
            out, _ = fwd(arrays, node.attrs)
            if out.dtype != node.output.dtype or not np.array_equal(out, node.output.data):
                return False
        return True


def recording() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class no_tape:
    """Suspend recording inside an active tape (e.g. while decoding)."""

    def __enter__(self):
        _ACTIVE.append(None)

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


# ---------------------------------------------------------------------------
# primitive implementations: forward(arrays, attrs) -> (out, saved)
#                            backward(g, arrays, out, saved, attrs) -> grads
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _matmul_check(a, b, attrs):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None


def _matmul_fwd(x, attrs):
    a, b = x
    _matmul_check(a, b, attrs)
    return a @ b, None


def _matmul_bwd(g, x, out, saved, attrs):
    a, b = x
    return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)


def _add_fwd(x, attrs):
    a, b = x
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise ShapeError(f"add: shape {b.shape} is neither equal to nor a trailing bias of {a.shape}")
    return a + b, None


def _add_bwd(g, x, out, saved, attrs):
    return g, _unbroadcast(g, x[1].shape)


def _scale_fwd(x, attrs):
    (a,) = x
    c = attrs["c"]
    if isinstance(c, np.ndarray):
        if c.shape != a.shape:
            raise ShapeError(f"scale: factor shape {c.shape} does not match operand {a.shape}")
        c = c.astype(a.dtype, copy=False)
    return a * c, None


def _scale_bwd(g, x, out, saved, attrs):
    c = attrs["c"]
    if isinstance(c, np.ndarray):
        c = c.astype(g.dtype, copy=False)
    return (g * c,)


def _softmax_fwd(x, attrs):
    (a,) = x
    mask = attrs.get("mask")
    if mask is not None:
        a = a + mask.astype(a.dtype, copy=False)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, None


def _softmax_bwd(g, x, y, saved, attrs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(x, attrs):
    (a,) = x
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(g, x, y, saved, attrs):
    return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def _layer_norm_fwd(x, attrs):
    a, gain, bias = x
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer-norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_bwd(g, x, out, saved, attrs):
    a, gain, bias = x
    xhat, inv = saved
    lead = tuple(range(a.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dbias = g.sum(axis=lead)
    dxhat = g * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu_fwd(x, attrs):
    (a,) = x
    t = np.tanh(_GELU_C * (a + 0.044715 * (a * a * a)))
    return 0.5 * a * (1.0 + t), t


def _gelu_bwd(g, x, out, t, attrs):
    (a,) = x
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


def _relu_fwd(x, attrs):
    (a,) = x
    return np.maximum(a, 0), None


def _relu_bwd(g, x, out, saved, attrs):
    # subgradient 0 at the kink
    return (g * (x[0] > 0),)


def _embed_fwd(x, attrs):
    (table,) = x
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding-lookup: ids outside [0, {table.shape[0]})")
    return table[ids], None


def _embed_bwd(g, x, out, saved, attrs):
    gt = np.zeros_like(x[0])
    np.add.at(gt, attrs["ids"].reshape(-1), g.reshape(-1, gt.shape[1]))
    return (gt,)


def _concat_fwd(x, attrs):
    ax = attrs["axis"]
    ref = x[0].shape
    for a in x[1:]:
        if a.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(a.shape, ref)) if i != ax % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {a.shape} differ off axis {ax}")
    return np.concatenate(x, axis=ax), None


def _concat_bwd(g, x, out, saved, attrs):
    ax = attrs["axis"]
    cuts = np.cumsum([a.shape[ax] for a in x])[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _slice_fwd(x, attrs):
    (a,) = x
    ax, lo, hi = attrs["axis"], attrs["start"], attrs["stop"]
    if not (0 <= lo < hi <= a.shape[ax]):
        raise ShapeError(f"slice: [{lo}:{hi}] out of range for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(lo, hi)
    return a[tuple(idx)], None


def _slice_bwd(g, x, out, saved, attrs):
    (a,) = x
    ga = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    ga[tuple(idx)] = g
    return (ga,)


def _transpose_fwd(x, attrs):
    (a,) = x
    axes = attrs["axes"]
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        attrs["axes"] = axes
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.ascontiguousarray(a.transpose(axes)), None


def _transpose_bwd(g, x, out, saved, attrs):
    return (g.transpose(np.argsort(attrs["axes"])),)


def _reshape_fwd(x, attrs):
    (a,) = x
    try:
        return a.reshape(attrs["shape"]), None
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {attrs['shape']}") from None


def _reshape_bwd(g, x, out, saved, attrs):
    return (g.reshape(x[0].shape),)


def _xent_fwd(x, attrs):
    (logp,) = x
    tgt = attrs["targets"]
    if logp.shape[:-1] != tgt.shape:
        raise ShapeError(f"cross-entropy-from-logprobs: logprobs {logp.shape} vs targets {tgt.shape}")
    w = attrs.get("weights")
    if w is not None and w.shape != tgt.shape:
        raise ShapeError(f"cross-entropy-from-logprobs: weights {w.shape} vs targets {tgt.shape}")
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    out = -picked if w is None else -(w.astype(logp.dtype, copy=False) * picked)
    return out, None


def _xent_bwd(g, x, out, saved, attrs):
    (logp,) = x
    tgt = attrs["targets"]
    w = attrs.get("weights")
    coef = -g if w is None else -(g * w.astype(g.dtype, copy=False))
    gl = np.zeros_like(logp)
    np.put_along_axis(gl, tgt[..., None], coef[..., None], axis=-1)
    return (gl,)


def _sum_fwd(x, attrs):
    return np.asarray(x[0].sum(axis=attrs.get("axis"))), None


def _sum_bwd(g, x, out, saved, attrs):
    (a,) = x
    ax = attrs.get("axis")
    if ax is not None:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_fwd(x, attrs):
    return np.asarray(x[0].mean(axis=attrs.get("axis"))), None


def _mean_bwd(g, x, out, saved, attrs):
    (a,) = x
    ax = attrs.get("axis")
    n = a.size if ax is None else a.shape[ax]
    if ax is not None:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / n, a.shape).copy(),)


_PRIMS: dict[str, tuple[Callable, Callable, int | None]] = {
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "add": (_add_fwd, _add_bwd, 2),
    "scale": (_scale_fwd, _scale_bwd, 1),
    "softmax-rows": (_softmax_fwd, _softmax_bwd, 1),
    "log-softmax-rows": (_log_softmax_fwd, _log_softmax_bwd, 1),
    "layer-norm": (_layer_norm_fwd, _layer_norm_bwd, 3),
    "gelu": (_gelu_fwd, _gelu_bwd, 1),
    "relu": (_relu_fwd, _relu_bwd, 1),
    "embedding-lookup": (_embed_fwd, _embed_bwd, 1),
    "concat": (_concat_fwd, _concat_bwd, None),
    "slice": (_slice_fwd, _slice_bwd, 1),
    "transpose": (_transpose_fwd, _transpose_bwd, 1),
    "reshape": (_reshape_fwd, _reshape_bwd, 1),
    "cross-entropy-from-logprobs": (_xent_fwd, _xent_bwd, 1),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "mean": (_mean_fwd, _mean_bwd, 1),
}

PRIMITIVES = tuple(_PRIMS)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``inputs``; constants go in ``attrs``.

    Records a node on the active tape, if any.
    """
    try:
        fwd, _, arity = _PRIMS[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    inputs = list(inputs)
    if arity is not None and len(inputs) != arity:
        raise ContractError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    if not inputs:
        raise ContractError(f"{kind}: no inputs")
    dtype = inputs[0].dtype
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
        if t.dtype != dtype:
            raise ContractError(f"{kind}: mixed precision inputs ({dtype} and {t.dtype})")
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, saved = fwd(arrays, attrs)
    out = np.asarray(out, dtype=dtype)
    if not np.isfinite(out).all():
        raise NumericFault(f"{kind}: non-finite output")
    result = Tensor(out)
    tape = recording()
    if tape is not None:
        tape._record(kind, inputs, result, saved, attrs)
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every leaf on ``tape``.

    Returns a map from leaf node id to gradient array; leaves the loss does
    not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    root = tape.node_id(loss)
    grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    for nid in range(root, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.kind == "leaf":
            continue
        bwd = _PRIMS[node.kind][1]
        arrays = [tape.nodes[i].output.data for i in node.inputs]
        parts = bwd(g, arrays, node.output.data, node.saved, node.attrs)
        for i, gi in zip(node.inputs, parts):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
        if nid != root:
            del grads[nid]
    return {
        i: grads.get(i, np.zeros_like(tape.nodes[i].output.data)).astype(
            tape.nodes[i].output.dtype, copy=False
        )
        for i in tape.leaves()
    }


def grad_by_name(tape: Tape, grads: Mapping[int, np.ndarray], tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Re-key a leaf-gradient map by the names in ``tensors``."""
    out = {}
    for name, t in tensors.items():
        nid = tape._index.get(id(t))
        out[name] = grads[nid] if nid is not None else np.zeros_like(t.data)
    return out


# ---------------------------------------------------------------------------
# thin functional wrappers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def scale(a: Tensor, c) -> Tensor:
    if not isinstance(c, np.ndarray):
        c = float(c)
    return apply_primitive("scale", [a], c=c)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return apply_primitive("softmax-rows", [a], mask=mask)


def log_softmax_rows(a: Tensor) -> Tensor:
    return apply_primitive("log-softmax-rows", [a])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer-norm", [x, gain, bias], eps=eps)


def gelu(a: Tensor) -> Tensor:
    return apply_primitive("gelu", [a])


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def embedding(table: Tensor, ids) -> Tensor:
    return apply_primitive("embedding-lookup", [table], ids=np.asarray(ids, dtype=np.int64))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(ts), axis=axis)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", [a], axis=axis, start=start, stop=stop)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    return apply_primitive("transpose", [a], axes=axes)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def cross_entropy(logp: Tensor, targets, weights=None) -> Tensor:
    """Per-position ``-weights * logp[target]``; reduce with :func:`sum_`."""
    targets = np.asarray(targets, dtype=np.int64)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    return apply_primitive("cross-entropy-from-logprobs", [logp], targets=targets, weights=weights)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("sum", [a], axis=axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("mean", [a], axis=axis)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def rate(self, step: int) -> float:
        """Learning rate for 1-based ``step``.

        Linear warmup to ``lr`` over ``warmup`` steps, then ``lr * sqrt(warmup / step)``.
        With ``warmup == 0`` the rate is constant.
        """
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))


def adam_step(params, grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``params`` is either a name->array mapping or anything exposing
    ``.tensors`` and ``.replace(tensors)`` (e.g. ``TransformerParams``).
    Inputs are not modified.
    """
    tensors = params.tensors if hasattr(params, "tensors") else params
    if set(grads) != set(tensors):
        missing = sorted(set(tensors) - set(grads))
        extra = sorted(set(grads) - set(tensors))
        raise ContractError(f"adam_step: gradient keys mismatch (missing={missing}, extra={extra})")
    t = state.step + 1
    lr = state.rate(t)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in tensors.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * (g * g) if v is None else b2 * v + (1 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = p - lr * upd
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(state.lr, b1, b2, eps, state.warmup, t, new_m, new_v)
    out = params.replace(new_p) if hasattr(params, "tensors") else new_p
    return out, new_state


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_errors(
    fn: Callable[[dict[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-4,
    grad_transform: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]] | None = None,
) -> dict[str, float]:
    """Per-tensor max relative error between backward() and central differences.

    ``fn`` maps a dict of named leaf tensors to a scalar tensor. Tensors with
    more than ``max_coords`` entries are checked on a random sample of that
    many coordinates. ``grad_transform`` is applied to the analytic gradients
    before comparison (used to plant faults in tests).
    """
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    def value(arrs):
        return fn({k: Tensor(v, name=k) for k, v in arrs.items()}).item()

    if value(point) != value(point):
        raise ContractError("finite_difference_check: function is not deterministic")

    leaves = {k: Tensor(v, name=k) for k, v in point.items()}
    with Tape() as tape:
        loss = fn(leaves)
    grads = grad_by_name(tape, backward(tape, loss), leaves)
    if grad_transform is not None:
        grads = grad_transform(grads)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in point.items():
        flat = arr.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        g = grads[name].reshape(-1)
        for c in coords:
            probe = dict(point)
            plus = flat.copy()
            plus[c] += step
            probe[name] = plus.reshape(arr.shape)
            fp = value(probe)
            minus = flat.copy()
            minus[c] -= step
            probe[name] = minus.reshape(arr.shape)
            fm = value(probe)
            num = (fp - fm) / (2 * step)
            worst = max(worst, _rel_err(float(g[c]), num, floor))
        errors[name] = worst
    return errors


def finite_difference_check(fn, point, step: float = 1e-5, **kw) -> float:
    """Max relative gradient error over all tensors in ``point`` (f64)."""
    errs = finite_difference_errors(fn, point, step, **kw)
    return max(errs.values()) if errs else 0.0
