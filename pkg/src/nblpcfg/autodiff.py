"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every operation returns a :class:`Node` that remembers its inputs and a
closure computing input gradients from the output gradient. ``backward``
walks the graph in reverse topological order. There is no implicit
broadcasting: elementwise ops require identical shapes, and contractions
name their axes explicitly through einsum-style subscripts.

Log-zero is ``-inf`` throughout.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "leaf",
    "constant",
    "as_node",
    "matmul",
    "add",
    "sub",
    "scale",
    "relu",
    "concat",
    "gather_rows",
    "take",
    "getitem",
    "reshape",
    "transpose",
    "sum_all",
    "logsumexp",
    "log_softmax",
    "logaddexp",
    "log_einsum",
    "stack_windows",
    "shifted_exp",
    "log_window_sum",
    "checkpoint",
    "backward",
    "finite_diff_check",
]

NEG_INF = -np.inf


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Node:
    """A value in the computation graph.

    ``grad`` reads as zeros until :func:`backward` has run through this node
    (only leaves with ``requires_grad`` keep their gradient).
    """

    __slots__ = ("value", "op", "inputs", "requires_grad", "_backward", "_grad")

    def __init__(self, value, op="leaf", inputs=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(n.requires_grad for n in self.inputs)
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def _check_values(values):
    arr = np.array(values, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("leaf values contain NaN")
    return arr


def leaf(values, requires_grad=True):
    """Create a graph input. NaN is rejected; ``-inf`` is allowed."""
    return Node(_check_values(values), requires_grad=requires_grad)


def constant(values):
    return Node(np.asarray(values, dtype=np.float64), requires_grad=False)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, inputs, backward_fn):
    inputs = tuple(inputs)
    if not any(n.requires_grad for n in inputs):
        return Node(value, op, inputs, None)
    return Node(value, op, inputs, backward_fn)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), bw)


def add(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "add")
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def scale(a, c):
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    ref = nodes[0].value
    ax = axis % ref.ndim
    for n in nodes[1:]:
        v = n.value
        if v.ndim != ref.ndim or any(
            v.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {v.shape} do not conform on axis {axis}")
    sizes = [n.shape[ax] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([n.value for n in nodes], axis=ax), "concat", nodes, bw)


def gather_rows(a, indices):
    """Select rows of ``a`` (first axis) in the given order; repeats allowed."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], "gather_rows", (a,), bw)


def take(a, indices, axis):
    """``np.take`` along one axis, with scatter-add backward."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.value.ndim
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim))))
        return (out,)

    return _make(np.take(a.value, idx, axis=ax), "take", (a,), bw)


def getitem(a, key):
    """Indexing without repeated positions (slices, integers, unique index arrays)."""
    a = as_node(a)

    def bw(g):
        return (_SliceGrad(key, g),)

    return _make(a.value[key], "getitem", (a,), bw)


def reshape(a, shape):
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_node(a)
    axes = tuple(range(a.value.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def sum_all(a):
    a = as_node(a)
    shape = a.shape
    return _make(np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# log-space reductions


def _lse_value(x, axis, allow_empty):
    m = np.max(x, axis=axis, keepdims=True)
    empty = np.isneginf(m)
    if empty.any() and not allow_empty:
        raise ValueError("logsumexp over an all -inf slice")
    m = np.where(empty, 0.0, m)
    t = np.subtract(x, m)
    np.exp(t, out=t)
    out = t.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        np.log(out, out=out)
    out += m
    return out


def logsumexp(a, axis=-1, allow_empty=False):
    """Max-shifted log-sum-exp over ``axis`` (int or tuple).

    An all ``-inf`` slice is an error unless ``allow_empty`` is set, in which
    case the result is ``-inf`` with zero gradient.
    """
    a = as_node(a)
    x = a.value
    keep = _lse_value(x, axis, allow_empty)
    out = np.squeeze(keep, axis=axis)

    def bw(g):
        ge = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x - keep)
        w = np.where(np.isneginf(keep), 0.0, w)
        return (ge * w,)

    return _make(out, "logsumexp", (a,), bw)


def log_softmax(a, axis=-1):
    a = as_node(a)
    x = a.value
    keep = _lse_value(x, axis, allow_empty=False)
    out = x - keep

    def bw(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), bw)


def logaddexp(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "logaddexp")
    out = np.logaddexp(a.value, b.value)
    av, bv = a.value, b.value

    def bw(g):
        with np.errstate(invalid="ignore"):
            wa = np.exp(av - out)
            wb = np.exp(bv - out)
        dead = np.isneginf(out)
        return np.where(dead, 0.0, g * wa), np.where(dead, 0.0, g * wb)

    return _make(out, "logaddexp", (a, b), bw)


# ---------------------------------------------------------------------------
# labelled log-space contraction


def _parse_subscripts(subscripts, n):
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n:
        raise ShapeError(f"log_einsum: {len(ins)} input specs for {n} operands")
    for s in ins:
        if len(set(s)) != len(s):
            raise ShapeError(f"log_einsum: repeated label in {s!r}")
    return ins, out


def _check_dims(ins, nodes):
    dims = {}
    for spec, node in zip(ins, nodes):
        if len(spec) != node.value.ndim:
            raise ShapeError(f"log_einsum: spec {spec!r} does not match shape {node.shape}")
        for lab, size in zip(spec, node.shape):
            if dims.setdefault(lab, size) != size:
                raise ShapeError(
                    f"log_einsum: label {lab!r} has sizes {dims[lab]} and {size} "
                    f"(shapes {[n.shape for n in nodes]})"
                )
    return dims


def _align(arr, labels, target):
    """Transpose/expand ``arr`` (axes ``labels``) so it broadcasts against ``target`` labels."""
    present = [lab for lab in target if lab in labels]
    arr = arr.transpose([labels.index(lab) for lab in present])
    shape = [arr.shape[present.index(lab)] if lab in labels else 1 for lab in target]
    return arr.reshape(shape)


@lru_cache(maxsize=4096)
def _path(subscripts, shapes):
    """Pairwise contraction order, greedily keeping each intermediate smallest.

    Ties go to the pair with fewer batch entries, i.e. the larger matmuls.
    """
    lhs, out = subscripts.replace(" ", "").split("->")
    specs = lhs.split(",")
    size = {c: d for s, shp in zip(specs, shapes) for c, d in zip(s, shp)}
    vol = lambda labs: math.prod(size[c] for c in labs)
    path = []
    while len(specs) > 1:
        best = None
        for i in range(len(specs)):
            for j in range(i + 1, len(specs)):
                rest = set(out).union(*(s for k, s in enumerate(specs) if k not in (i, j)))
                labs = "".join(dict.fromkeys(c for c in specs[i] + specs[j] if c in rest))
                batch = set(specs[i]) & set(specs[j]) & set(labs)
                key = (vol(labs), vol(set(specs[i] + specs[j])), vol(batch))
                if best is None or key < best[0]:
                    best = (key, i, j, labs)
        _, i, j, labs = best
        path.append((i, j))
        specs = [s for k, s in enumerate(specs) if k not in (i, j)] + [labs]
    return path


_MATMUL_MIN_WORK = 4096


def _pair(sa, a, sb, b, so):
    """Contract two labelled arrays into labels ``so`` with one batched matmul."""
    drop = tuple(i for i, c in enumerate(sa) if c not in sb and c not in so)
    if drop:
        a, sa = a.sum(axis=drop), "".join(c for c in sa if c in sb or c in so)
    drop = tuple(i for i, c in enumerate(sb) if c not in sa and c not in so)
    if drop:
        b, sb = b.sum(axis=drop), "".join(c for c in sb if c in sa or c in so)
    batch = [c for c in sa if c in sb and c in so]
    contr = [c for c in sa if c in sb and c not in so]
    left = [c for c in sa if c not in sb]
    right = [c for c in sb if c not in sa]
    size = dict(zip(sa, a.shape))
    size.update(zip(sb, b.shape))
    n = lambda labs: int(np.prod([size[c] for c in labs], dtype=np.int64))
    if n(batch) > 1 and n(left) * n(contr) * n(right) < _MATMUL_MIN_WORK:
        return np.einsum(f"{sa},{sb}->{so}", a, b)
    am = a.transpose([sa.index(c) for c in batch + left + contr]).reshape(n(batch), n(left), n(contr))
    bm = b.transpose([sb.index(c) for c in batch + contr + right]).reshape(n(batch), n(contr), n(right))
    got = batch + left + right
    # strided operands would send matmul to its non-BLAS loop
    out = np.matmul(np.ascontiguousarray(am), np.ascontiguousarray(bm)).reshape([size[c] for c in got])
    return out.transpose([got.index(c) for c in so])


def _einsum(subscripts, *arrays, optimize=True):
    """``np.einsum`` semantics; with ``optimize`` operands are contracted
    pairwise along the optimal order, each pair as one batched matmul."""
    if not optimize or len(arrays) < 2:
        return np.einsum(subscripts, *arrays)
    lhs, out = subscripts.replace(" ", "").split("->")
    specs, arrs = lhs.split(","), list(arrays)
    for pos in _path(subscripts, tuple(a.shape for a in arrays)):
        pos = sorted(pos, reverse=True)
        picked = [(specs.pop(k), arrs.pop(k)) for k in pos]
        need = set(out).union(*specs)
        labs = "".join(dict.fromkeys(c for sp, _ in picked for c in sp if c in need))
        specs.append(labs)
        if len(picked) == 2:
            (sa, a), (sb, b) = picked
            arrs.append(_pair(sa, a, sb, b, labs))
        else:
            sub = ",".join(sp for sp, _ in picked) + "->" + labs
            arrs.append(np.einsum(sub, *(x for _, x in picked)))
    return arrs[0].transpose([specs[0].index(c) for c in out]) if specs[0] != out else arrs[0]


def log_einsum(subscripts, *operands, exact=False, optimize=True):
    """``log sum_{contracted} exp(sum_k operand_k)`` with labelled axes.

    Labels absent from the output are summed in log space. With
    ``exact=True`` the full label space is materialized and reduced with a
    max-shifted logsumexp; otherwise each operand is shifted by its maximum
    over its contracted axes, exponentiated, and contracted with
    ``np.einsum`` (BLAS where possible). ``optimize=False`` forces the
    literal nested summation.
    """
    nodes = [as_node(o) for o in operands]
    ins, out_lab = _parse_subscripts(subscripts, len(nodes))
    dims = _check_dims(ins, nodes)
    if exact:
        return _log_einsum_exact(ins, out_lab, nodes, dims)
    return _log_einsum_shift(subscripts, ins, out_lab, nodes, optimize)


def _log_einsum_exact(ins, out_lab, nodes, dims):
    full = out_lab + "".join(sorted({c for s in ins for c in s} - set(out_lab)))
    shape = [dims[c] for c in full]
    red = tuple(range(len(out_lab), len(full)))

    def summed():
        total = None
        for spec, n in zip(ins, nodes):
            part = _align(n.value, spec, full)
            total = part if total is None else total + part
        if total.shape != tuple(shape) or len(nodes) == 1:
            total = np.array(np.broadcast_to(total, shape))
        return total

    def reduce_to_inputs(w):
        grads = []
        for spec in ins:
            drop = tuple(i for i, c in enumerate(full) if c not in spec)
            r = w.sum(axis=drop) if drop else w
            kept = [c for c in full if c in spec]
            grads.append(r.transpose([kept.index(c) for c in spec]))
        return tuple(grads)

    if not red:
        return _make(summed(), "log_einsum", nodes, lambda g: reduce_to_inputs(np.asarray(g)))
    total = summed()
    keep = np.max(total, axis=red, keepdims=True)
    dead = np.isneginf(keep)
    keep[dead] = 0.0
    total -= keep
    np.exp(total, out=total)
    z = total.sum(axis=red, keepdims=True)
    del total
    with np.errstate(divide="ignore"):
        np.log(z, out=z)
    z += keep
    # dead slices backpropagate nothing: shifting them by +inf makes every weight 0
    shift = np.where(dead, np.inf, z)
    out = z.reshape([dims[c] for c in out_lab])

    def bw(g):
        w = summed()
        w -= shift
        np.exp(w, out=w)
        w *= _align(g, out_lab, full)
        return reduce_to_inputs(w)

    return _make(out, "log_einsum", nodes, bw)


def _log_einsum_shift(subscripts, ins, out_lab, nodes, optimize):
    shifts = []
    shift_total = 0.0
    for spec, n in zip(ins, nodes):
        x = n.value
        red = tuple(i for i, c in enumerate(spec) if c not in out_lab)
        if red:
            m = np.max(x, axis=red, keepdims=True)
            m = np.where(np.isneginf(m), 0.0, m)
        else:
            m = np.where(np.isneginf(x), 0.0, x)
        shifts.append(m)
        kept = "".join(c for c in spec if c in out_lab)
        m_kept = m.reshape([x.shape[i] for i, c in enumerate(spec) if c in out_lab])
        shift_total = shift_total + _align(m_kept, kept, out_lab)
    z = _einsum(subscripts, *(np.exp(n.value - m) for n, m in zip(nodes, shifts)), optimize=optimize)
    with np.errstate(divide="ignore"):
        out = np.log(z) + shift_total
    out = np.asarray(out, dtype=np.float64)

    def bw(g):
        # exponentials are recomputed rather than held between passes
        shifted = [np.exp(n.value - m) for n, m in zip(nodes, shifts)]
        with np.errstate(divide="ignore", invalid="ignore"):
            gz = np.where(z > 0, g / z, 0.0)
        grads = []
        for k, spec in enumerate(ins):
            others = [s for j, s in enumerate(ins) if j != k]
            avail = set(out_lab).union(*others) if others else set(out_lab)
            target = "".join(c for c in spec if c in avail)
            sub = ",".join([out_lab] + others) + "->" + target
            arrs = [gz] + [shifted[j] for j in range(len(ins)) if j != k]
            r = _einsum(sub, *arrs, optimize=optimize)
            r = _align(r, target, spec)
            grads.append(shifted[k] * r)
        return tuple(grads)

    return _make(out, "log_einsum", nodes, bw)


# ---------------------------------------------------------------------------
# chart support


class _SliceGrad:
    """Gradient that is nonzero only on ``key`` of the input."""

    __slots__ = ("key", "value")

    def __init__(self, key, value):
        self.key = key
        self.value = value


def stack_windows(nodes, starts, length, axis=1):
    """Stack ``nodes[u][..., starts[u]:starts[u]+length, ...]`` along a new axis ``axis+1``.

    All slices are taken on ``axis``. This is how charts gather the children
    of every split point for a whole span width in one node.
    """
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack_windows: no inputs")
    pieces = []
    for n, s in zip(nodes, starts):
        idx = [slice(None)] * n.value.ndim
        idx[axis] = slice(s, s + length)
        pieces.append(n.value[tuple(idx)])
    try:
        out = np.stack(pieces, axis=axis + 1)
    except ValueError as exc:
        raise ShapeError(f"stack_windows: {[p.shape for p in pieces]}") from exc

    def bw(g):
        grads = []
        for u, (n, s) in enumerate(zip(nodes, starts)):
            idx = [slice(None)] * n.value.ndim
            idx[axis] = slice(s, s + length)
            grads.append(_SliceGrad(tuple(idx), g[(slice(None),) * (axis + 1) + (u,)]))
        return tuple(grads)

    return _make(out, "stack_windows", nodes, bw)


def shifted_exp(x, axis):
    """``(exp(x - m), m)`` with ``m`` the max over ``axis`` (kept; 0 where all ``-inf``)."""
    m = np.max(x, axis=axis, keepdims=True)
    m[np.isneginf(m)] = 0.0
    return np.exp(x - m), m


def log_window_sum(terms, length):
    """``log sum_t exp(a_t[:, i+s_t, p, h] + b_t[:, i+r_t, h])`` for ``i < length``.

    Each term is ``(a, (ea, ma), s_t, b, r_t)``: ``a`` is a ``(batch, k, P, H)``
    node with its precomputed :func:`shifted_exp` over axis 2, ``b`` a
    ``(batch, k', H)`` node. The sum is taken in exp space against the
    per-term maxima, so only tensors of the output size are exponentiated
    and nothing of size ``terms x output`` is held for the backward pass.
    """
    if not terms:
        raise ShapeError("log_window_sum: no terms")
    a0 = terms[0][1][0]
    b, _, P, H = a0.shape
    n = length
    scores = np.stack([ma[:, s:s + n, 0, :] + bn.value[:, r:r + n, :] for _, (_, ma), s, bn, r in terms])
    top = scores.max(axis=0)
    top[np.isneginf(top)] = 0.0
    scale_t = np.exp(scores - top)  # (T, b, n, H)
    z = np.zeros((b, n, P, H))
    for t, (_, (ea, _), s, _, _) in enumerate(terms):
        z += ea[:, s:s + n] * scale_t[t][:, :, None, :]
    with np.errstate(divide="ignore"):
        out = np.log(z) + top[:, :, None, :]
    nodes = []
    for a, _, _, bn, _ in terms:
        nodes += [a, bn]

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gz = np.where(z > 0, g / z, 0.0)
        grads = []
        for t, (a, (ea, _), s, bn, r) in enumerate(terms):
            if not (a.requires_grad or bn.requires_grad):
                grads += [None, None]
                continue
            ge = gz * ea[:, s:s + n]
            st = scale_t[t]
            ga = _SliceGrad((slice(None), slice(s, s + n)), ge * st[:, :, None, :]) if a.requires_grad else None
            gb = _SliceGrad((slice(None), slice(r, r + n)), ge.sum(axis=2) * st) if bn.requires_grad else None
            grads += [ga, gb]
        return tuple(grads)

    return _make(out, "log_window_sum", nodes, bw)


def checkpoint(fn, *inputs):
    """``fn(*inputs)`` without keeping its intermediate values.

    The forward pass runs on constant copies and keeps only the result; the
    backward pass runs ``fn`` again with differentiable copies and
    backpropagates through that fresh graph. ``fn`` must reach every
    differentiable node through ``inputs``.
    """
    inputs = [as_node(x) for x in inputs]
    out = fn(*(constant(x.value) for x in inputs))
    if out.requires_grad:
        raise ValueError("checkpoint: fn uses a differentiable node that is not among its inputs")
    value = out.value
    del out

    def bw(g):
        proxies = [Node(x.value, requires_grad=x.requires_grad) for x in inputs]
        got = _backprop(fn(*proxies), g)
        return tuple(got.get(p) for p in proxies)

    return _make(value, "checkpoint", inputs, bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen and inp.requires_grad:
                stack.append((inp, False))
    return order


def backward(root):
    """Differentiate the scalar ``root`` with respect to every requiring leaf.

    Returns ``{leaf: gradient}`` and also stores each gradient on ``leaf.grad``
    (overwriting any previous value).
    """
    if root.value.shape != ():
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    return _backprop(root, np.ones(()))


def _backprop(root, seed):
    grads = {id(root): seed}
    owned = set()
    leaves = {}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not node.inputs:
                leaves[node] = g
            continue
        for inp, gi in zip(node.inputs, node._backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            prev = grads.get(key)
            if isinstance(gi, _SliceGrad):
                if prev is None:
                    prev = np.zeros(inp.shape)
                elif key not in owned:
                    prev = np.array(prev)
                grads[key] = prev
                owned.add(key)
                prev[gi.key] += gi.value
            elif prev is None:
                grads[key] = gi
            else:
                grads[key] = prev + gi
                owned.add(key)
    for n, g in leaves.items():
        n.grad = np.asarray(g, dtype=np.float64).reshape(n.shape)
    return leaves


def finite_diff_check(f, point, step=1e-5, tol=1e-4, coords=None, floor=1e-2):
    """Compare :func:`backward` gradients with central differences.

    ``f`` maps a list of leaf nodes to a scalar node; ``point`` is a list of
    arrays. ``coords`` optionally limits the check to an iterable of
    ``(leaf_index, flat_index)`` pairs. The relative error uses
    ``max(|numeric|, |analytic|, floor)`` as denominator so that vanishing
    gradients are judged absolutely. Returns a dict with ``max_rel_err``,
    ``ok`` and the per-coordinate records.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    leaves = [leaf(p) for p in point]
    out = f(leaves)
    backward(out)
    analytic = [lf.grad.copy() for lf in leaves]

    def value_at(k, flat, delta):
        arrs = [p.copy() for p in point]
        arrs[k].reshape(-1)[flat] += delta
        return float(f([constant(a) for a in arrs]).value)

    if coords is None:
        coords = [(k, i) for k, p in enumerate(point) for i in range(p.size)]
    records = []
    worst = 0.0
    for k, i in coords:
        num = (value_at(k, i, step) - value_at(k, i, -step)) / (2 * step)
        ana = float(analytic[k].reshape(-1)[i])
        denom = max(abs(num), abs(ana), floor)
        err = abs(num - ana) / denom
        worst = max(worst, err)
        records.append((k, i, ana, num, err))
    return {"max_rel_err": worst, "ok": worst <= tol and math.isfinite(worst), "records": records}
