"""Dense float64 tensor primitives on a define-by-run reverse-mode tape.

Values are plain numpy float64 arrays; a :class:`Tape` records every primitive
application as a :class:`Node` so that :func:`backward` can sweep the DAG in
reverse and accumulate gradients.  Tapes are rebuilt from scratch for every
loss evaluation (attack results are data, so graphs differ per batch).

A batch dimension, when present, is always axis 0.  Convolution inputs are
NCHW.  There is no general broadcasting: each primitive states exactly which
shapes it accepts.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Node",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for a primitive."""


def as_array(value, check_finite=False) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally rejecting NaN/Inf.

    0-d arrays are preserved (``ascontiguousarray`` would promote them).
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor")
    return arr


class Node:
    """One recorded primitive application.

    ``backward_rule`` maps the output gradient to a tuple of input gradients,
    one per entry of ``inputs`` (each shape-matched to that input's value).
    Leaves have no rule.
    """

    __slots__ = ("tape", "id", "op", "inputs", "value", "backward_rule")

    def __init__(self, tape, node_id, op, inputs, value, backward_rule):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_rule = backward_rule

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # Sugar for same-shape arithmetic; keeps loss assembly readable.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only record of nodes; creation order is a topological order.

    ``checked`` validates finiteness of every node value (slow, for tests).
    ``kink_tol``, when set, makes piecewise primitives (relu, abs, clamp,
    maximum_scalar) count how many elements sit within ``kink_tol`` of a
    non-differentiable point; :func:`finite_diff_check` uses this to skip
    coordinates whose central differences straddle a kink.
    """

    def __init__(self, checked=False, kink_tol=None):
        self.nodes: list[Node] = []
        self.checked = checked
        self.kink_tol = kink_tol
        self.kink_hits = 0

    def node(self, op, inputs, value, backward_rule) -> Node:
        value = as_array(value, check_finite=self.checked)
        for inp in inputs:
            if inp.tape is not self:
                raise ValueError(f"input node {inp.id} belongs to a different tape")
        n = Node(self, len(self.nodes), op, tuple(inputs), value, backward_rule)
        self.nodes.append(n)
        return n

    def leaf(self, value, op="leaf") -> Node:
        return self.node(op, (), value, None)

    def constant(self, value) -> Node:
        return self.leaf(value, op="const")

    def _note_kinks(self, distances):
        if self.kink_tol is not None:
            self.kink_hits += int(np.count_nonzero(distances < self.kink_tol))


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# Elementwise and scalar primitives
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.tape.node("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.tape.node("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.node("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Node, k: float) -> Node:
    k = float(k)
    return a.tape.node("scale", (a,), a.value * k, lambda g: (g * k,))


def add_scalar(a: Node, k: float) -> Node:
    return a.tape.node("add_scalar", (a,), a.value + float(k), lambda g: (g,))


def relu(a: Node) -> Node:
    av = a.value
    a.tape._note_kinks(np.abs(av))
    mask = av > 0.0
    return a.tape.node("relu", (a,), np.maximum(av, 0.0), lambda g: (g * mask,))


def abs_(a: Node) -> Node:
    av = a.value
    a.tape._note_kinks(np.abs(av))
    sign = np.sign(av)  # sign(0) == 0: subgradient choice at the kink
    return a.tape.node("abs", (a,), np.abs(av), lambda g: (g * sign,))


def maximum_scalar(a: Node, s: float) -> Node:
    s = float(s)
    av = a.value
    a.tape._note_kinks(np.abs(av - s))
    mask = av > s
    return a.tape.node("max_s", (a,), np.maximum(av, s), lambda g: (g * mask,))


def clamp(a: Node, lo: float, hi: float) -> Node:
    lo, hi = float(lo), float(hi)
    av = a.value
    a.tape._note_kinks(np.minimum(np.abs(av - lo), np.abs(av - hi)))
    mask = (av >= lo) & (av <= hi)
    return a.tape.node("clamp", (a,), np.clip(av, lo, hi), lambda g: (g * mask,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.node("exp", (a,), out, lambda g: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    return a.tape.node("log", (a,), np.log(av), lambda g: (g / av,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    return a.tape.node(
        "matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g)
    )


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.value.shape}")
    return a.tape.node("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def add_bias(a: Node, v: Node) -> Node:
    """Row-broadcast add: (B, n) + (n,)."""
    av, vv = a.value, v.value
    if av.ndim != 2 or vv.shape != (av.shape[1],):
        raise ShapeError(f"add_bias: {av.shape} + {vv.shape}")
    return a.tape.node(
        "add_bias", (a, v), av + vv[None, :], lambda g: (g, g.sum(axis=0))
    )


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    old = a.value.shape
    return a.tape.node(
        "reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),)
    )


def repeat_rows(a: Node, k: int) -> Node:
    """Tile each axis-0 row k times consecutively: (B, ...) -> (B*k, ...)."""
    av = a.value
    out = np.repeat(av, k, axis=0)
    b = av.shape[0]

    def bwd(g):
        return (g.reshape((b, k) + av.shape[1:]).sum(axis=1),)

    return a.tape.node("repeat_rows", (a,), out, bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(a: Node) -> Node:
    av = a.value
    return a.tape.node(
        "sum", (a,), np.asarray(av.sum()), lambda g: (np.broadcast_to(g, av.shape).copy(),)
    )


def mean_all(a: Node) -> Node:
    av = a.value
    inv = 1.0 / av.size
    return a.tape.node(
        "mean", (a,), np.asarray(av.mean()),
        lambda g: (np.broadcast_to(g * inv, av.shape).copy(),),
    )


def sum_rows(a: Node) -> Node:
    """Sum over axis 1: (R, C) -> (R,)."""
    av = a.value
    if av.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D, got {av.shape}")
    return a.tape.node(
        "sum_rows", (a,), av.sum(axis=1),
        lambda g: (np.repeat(g[:, None], av.shape[1], axis=1),),
    )


def logsumexp_rows(a: Node) -> Node:
    """Stable log(sum(exp(row))) per row: (B, K) -> (B,)."""
    av = a.value
    m = av.max(axis=1, keepdims=True)
    out = np.log(np.exp(av - m).sum(axis=1)) + m[:, 0]

    def bwd(g):
        return (np.exp(av - out[:, None]) * g[:, None],)

    return a.tape.node("logsumexp_rows", (a,), out, bwd)


def log1p_sum_exp_rows(a: Node) -> Node:
    """ln(1 + sum(exp(row))) per row, stable: (B, M) -> (B,).

    The implicit +1 plays the role of the true-class term exp(0) in the
    logit-difference cross-entropy.
    """
    av = a.value
    m = np.maximum(av.max(axis=1), 0.0)
    out = np.log(np.exp(-m) + np.exp(av - m[:, None]).sum(axis=1)) + m

    def bwd(g):
        return (np.exp(av - out[:, None]) * g[:, None],)

    return a.tape.node("log1p_sum_exp_rows", (a,), out, bwd)


# ---------------------------------------------------------------------------
# Per-row column indexing (class-label plumbing)
# ---------------------------------------------------------------------------

def _check_labels(op, av, idx):
    idx = np.asarray(idx, dtype=np.intp)
    if av.ndim != 2 or idx.shape != (av.shape[0],):
        raise ShapeError(f"{op}: values {av.shape}, labels {idx.shape}")
    if idx.min() < 0 or idx.max() >= av.shape[1]:
        raise ShapeError(f"{op}: label out of range for {av.shape[1]} columns")
    return idx


def pick_cols(a: Node, idx) -> Node:
    """Per-row single-column gather: (R, K), (R,) -> (R,)."""
    av = a.value
    idx = _check_labels("pick_cols", av, idx)
    rows = np.arange(av.shape[0])

    def bwd(g):
        da = np.zeros_like(av)
        da[rows, idx] = g
        return (da,)

    return a.tape.node("pick_cols", (a,), av[rows, idx], bwd)


def sub_col_pick(a: Node, idx) -> Node:
    """Subtract each row's idx-th entry from the whole row: logits -> diffs."""
    av = a.value
    idx = _check_labels("sub_col_pick", av, idx)
    rows = np.arange(av.shape[0])
    out = av - av[rows, idx][:, None]

    def bwd(g):
        da = g.copy()
        da[rows, idx] -= g.sum(axis=1)
        return (da,)

    return a.tape.node("sub_col_pick", (a,), out, bwd)


def drop_col(a: Node, idx) -> Node:
    """Remove one per-row column: (B, K) -> (B, K-1), remaining order kept."""
    av = a.value
    idx = _check_labels("drop_col", av, idx)
    b, k = av.shape
    keep = np.argsort(np.arange(k)[None, :] == idx[:, None], axis=1, kind="stable")
    keep = keep[:, : k - 1]  # stable argsort puts the dropped column last
    rows = np.arange(b)[:, None]

    def bwd(g):
        da = np.zeros_like(av)
        da[rows, keep] = g
        return (da,)

    return a.tape.node("drop_col", (a,), av[rows, keep], bwd)


# ---------------------------------------------------------------------------
# Convolution (NCHW, im2col)
# ---------------------------------------------------------------------------

def _conv_geometry(x_shape, w_shape, stride, padding):
    b, c, h, w = x_shape
    oc, ic, kh, kw = w_shape
    if ic != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ic}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x_shape}, kernel {w_shape}")
    return oh, ow


def im2col(x, kh, kw, stride, padding):
    """(B, C, H, W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col` (scatter-add patches back)."""
    b, c, h, w = x_shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        xp = xp[:, :, padding : padding + h, padding : padding + w]
    return xp


def conv2d(x: Node, w: Node, b: Node, stride: int, padding: int) -> Node:
    """Batched 2-D convolution: (B,C,H,W) * (O,C,kh,kw) + (O,) -> (B,O,OH,OW)."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {xv.shape}, {wv.shape}")
    oc = wv.shape[0]
    if bv.shape != (oc,):
        raise ShapeError(f"conv2d: bias {bv.shape} for {oc} output channels")
    oh, ow = _conv_geometry(xv.shape, wv.shape, stride, padding)
    bsz = xv.shape[0]
    kh, kw = wv.shape[2], wv.shape[3]
    cols = im2col(xv, kh, kw, stride, padding)          # (B, C*kh*kw, L)
    wmat = wv.reshape(oc, -1)                           # (O, C*kh*kw)
    out = np.einsum("ok,bkl->bol", wmat, cols, optimize=True)
    out = out.reshape(bsz, oc, oh, ow) + bv[None, :, None, None]

    def bwd(g):
        gm = g.reshape(bsz, oc, oh * ow)                # (B, O, L)
        dw = np.einsum("bol,bkl->ok", gm, cols, optimize=True).reshape(wv.shape)
        dcols = np.einsum("ok,bol->bkl", wmat, gm, optimize=True)
        dx = col2im(dcols, xv.shape, kh, kw, stride, padding)
        db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    return x.tape.node("conv2d", (x, w, b), out, bwd)


# ---------------------------------------------------------------------------
# Fused interval helper: radius through a label-elided affine layer
# ---------------------------------------------------------------------------

def elided_abs_linear(delta: Node, w: Node, idx) -> Node:
    """Radius map of a final affine layer elided per sample.

    value[b, k] = sum_n delta[b, n] * |w[k, n] - w[idx[b], n]|

    The per-sample row subtraction cannot be split into separate primitives
    because the absolute value binds the subtraction and the product.
    """
    dv, wv = delta.value, w.value
    if dv.ndim != 2 or wv.ndim != 2 or dv.shape[1] != wv.shape[1]:
        raise ShapeError(f"elided_abs_linear: delta {dv.shape}, weight {wv.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (dv.shape[0],):
        raise ShapeError(f"elided_abs_linear: labels {idx.shape} for batch {dv.shape[0]}")
    diff = wv[None, :, :] - wv[idx][:, None, :]         # (B, K, n)
    delta.tape._note_kinks(np.abs(diff))
    absdiff = np.abs(diff)
    out = np.einsum("bn,bkn->bk", dv, absdiff, optimize=True)

    def bwd(g):
        dd = np.einsum("bk,bkn->bn", g, absdiff, optimize=True)
        signed = np.sign(diff) * dv[:, None, :]         # d out[b,k] / d diff[b,k,n]
        per_bkn = g[:, :, None] * signed
        dw = per_bkn.sum(axis=0)
        np.subtract.at(dw, idx, per_bkn.sum(axis=1))
        return (dd, dw)

    return delta.tape.node("elided_abs_linear", (delta, w), out, bwd)


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Node, wanted=None) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar root over the whole tape.

    Returns a map node id -> gradient array; nodes the root does not reach
    get zeros.  ``wanted`` (an iterable of node ids) restricts the returned
    map and lets consumed intermediate gradients be freed during the sweep,
    which matters for large batched tapes.  Multiple sweeps over one tape
    are independent (no state is mutated), so several roots can be
    differentiated in turn.
    """
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.value.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    keep = None if wanted is None else set(wanted)
    grads: dict[int, np.ndarray] = {root.id: np.asarray(1.0)}
    out: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = grads.get(node.id)
        if g is None:
            continue
        if keep is not None and node.backward_rule is not None:
            del grads[node.id]  # fully consumed below
        if node.backward_rule is None:
            continue
        input_grads = node.backward_rule(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig.shape != inp.value.shape:
                raise ShapeError(
                    f"{node.op}: backward produced {ig.shape} for input of shape "
                    f"{inp.value.shape}"
                )
            acc = grads.get(inp.id)
            grads[inp.id] = ig.copy() if acc is None else acc + ig
        if keep is not None and node.id in keep:
            out[node.id] = g
    if keep is not None:
        for nid in keep:
            g = grads.get(nid)
            if nid not in out:
                out[nid] = np.zeros_like(tape.nodes[nid].value) if g is None else np.asarray(g)
        return out
    full = {}
    for node in tape.nodes:
        g = grads.get(node.id)
        full[node.id] = np.zeros_like(node.value) if g is None else np.asarray(g)
    return full


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

class FiniteDiffReport:
    """Outcome of a central finite-difference gradient comparison."""

    def __init__(self, max_rel_err, n_checked, n_skipped):
        self.max_rel_err = max_rel_err
        self.n_checked = n_checked
        self.n_skipped = n_skipped

    def __repr__(self):
        return (
            f"FiniteDiffReport(max_rel_err={self.max_rel_err:.3e}, "
            f"checked={self.n_checked}, skipped={self.n_skipped})"
        )


def finite_diff_check(f, theta, step=1e-6, max_coords=None, rng=None) -> FiniteDiffReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(theta_node)`` must build a scalar on ``theta_node.tape``.  Coordinates
    whose perturbed evaluations pass within ``10 * step`` of a piecewise kink
    (relu / abs / clamp inputs) are skipped and counted, not failed.
    """
    theta = as_array(theta)
    tol = 10.0 * step

    def evaluate(values):
        tape = Tape(kink_tol=tol)
        root = f(tape.leaf(values))
        if root.value.shape != ():
            raise ValueError("finite_diff_check requires a scalar-valued function")
        return tape, root

    tape, root = evaluate(theta)
    analytic = backward(tape, root)[tape.nodes[0].id].ravel()
    base_kinky = tape.kink_hits > 0

    flat = theta.ravel()
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    max_err = 0.0
    checked = skipped = 0
    for i in coords:
        if base_kinky:
            skipped += 1
            continue
        bumped = flat.copy()
        bumped[i] += step
        t_hi, r_hi = evaluate(bumped.reshape(theta.shape))
        bumped[i] -= 2 * step
        t_lo, r_lo = evaluate(bumped.reshape(theta.shape))
        if t_hi.kink_hits or t_lo.kink_hits:
            skipped += 1
            continue
        fd = (float(r_hi.value) - float(r_lo.value)) / (2 * step)
        err = abs(analytic[i] - fd) / (abs(fd) + 1e-12)
        max_err = max(max_err, err)
        checked += 1
    return FiniteDiffReport(max_err, checked, skipped)
