"""Differentiable interval (Box) propagation through networks or prefixes.

Boxes are lower/upper tensor pairs; affine layers propagate the equivalent
center/radius form (two linear maps: W on the center, |W| on the radius),
which is exact per coordinate.  ReLU maps bounds elementwise.  The final
affine layer can be elided per sample label so the propagated quantities are
upper/lower bounds on logit differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .net import Affine, Conv2d, Flatten, Network, ReLU, lift_params

__all__ = [
    "BoxBounds",
    "box_from_ball",
    "propagate_interval",
    "ibp_bounds",
    "TapedBox",
    "propagate_box_on_tape",
    "elided_bounds_on_tape",
]


@dataclass(frozen=True)
class BoxBounds:
    """Axis-aligned bounds; ``lo <= hi`` elementwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.lo.shape != self.hi.shape:
            raise ValueError(f"box shapes differ: {self.lo.shape} vs {self.hi.shape}")
        if np.any(self.lo > self.hi):
            raise ValueError("box has lo > hi")

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self):
        return 0.5 * (self.hi - self.lo)

    @classmethod
    def from_center_radius(cls, center, radius):
        return cls(center - radius, center + radius)

    def contains(self, x, slack=0.0):
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))

    def sample(self, n, rng):
        u = rng.uniform(size=(n,) + self.lo.shape)
        return self.lo[None] + u * (self.hi - self.lo)[None]


def box_from_ball(x, eps, clip=(0.0, 1.0)) -> BoxBounds:
    """L-infinity ball around ``x``, optionally intersected with a value range."""
    if eps < 0:
        raise ValueError(f"negative radius {eps}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x - eps, x + eps
    if clip is not None:
        lo = np.maximum(lo, clip[0])
        hi = np.minimum(hi, clip[1])
    return BoxBounds(lo, hi)


@dataclass
class TapedBox:
    """Box whose bounds are differentiable tape nodes (batched, axis 0)."""

    lo: T.Node
    hi: T.Node

    def values(self) -> BoxBounds:
        return BoxBounds(self.lo.value, self.hi.value)


def _affine_box(box: TapedBox, w: T.Node, b: T.Node) -> TapedBox:
    center = T.scale(T.add(box.lo, box.hi), 0.5)
    radius = T.scale(T.sub(box.hi, box.lo), 0.5)
    wt = T.transpose(w)
    c_out = T.add_bias(T.matmul(center, wt), b)
    r_out = T.matmul(radius, T.transpose(T.abs_(w)))
    return TapedBox(T.sub(c_out, r_out), T.add(c_out, r_out))


def _conv_box(box: TapedBox, layer: Conv2d, w: T.Node, b: T.Node) -> TapedBox:
    center = T.scale(T.add(box.lo, box.hi), 0.5)
    radius = T.scale(T.sub(box.hi, box.lo), 0.5)
    zero_bias = w.tape.constant(np.zeros_like(layer.bias))
    c_out = T.conv2d(center, w, b, layer.stride, layer.padding)
    r_out = T.conv2d(radius, T.abs_(w), zero_bias, layer.stride, layer.padding)
    return TapedBox(T.sub(c_out, r_out), T.add(c_out, r_out))


def apply_layer_to_box(layer, box: TapedBox, params_entry) -> TapedBox:
    if isinstance(layer, Affine):
        return _affine_box(box, params_entry["weight"], params_entry["bias"])
    if isinstance(layer, Conv2d):
        return _conv_box(box, layer, params_entry["weight"], params_entry["bias"])
    if isinstance(layer, ReLU):
        return TapedBox(T.relu(box.lo), T.relu(box.hi))
    if isinstance(layer, Flatten):
        b = box.lo.value.shape[0]
        return TapedBox(T.reshape(box.lo, (b, -1)), T.reshape(box.hi, (b, -1)))
    raise TypeError(f"unknown layer {layer!r}")


def propagate_box_on_tape(net: Network, params, box: TapedBox, start=0, stop=None,
                          collect=None) -> TapedBox:
    """Propagate a batched box through layers[start:stop] on the tape.

    ``collect``, if given, is a list that receives (layer_index, TapedBox)
    after every layer (used by the stability regularizer).
    """
    stop = len(net.layers) if stop is None else stop
    for i in range(start, stop):
        box = apply_layer_to_box(net.layers[i], box, params[i] if params[i] else None)
        if collect is not None:
            collect.append((i, box))
    return box


def elided_bounds_on_tape(net: Network, params, box: TapedBox, labels,
                          start=0) -> TapedBox:
    """Bounds on logit differences: propagate to the end with the final
    affine layer elided per sample label.

    The elided center is the plain affine center minus its own label column;
    the elided radius needs the fused |W_i - W_y| primitive.
    """
    last = len(net.layers) - 1
    box = propagate_box_on_tape(net, params, box, start=start, stop=last)
    center = T.scale(T.add(box.lo, box.hi), 0.5)
    radius = T.scale(T.sub(box.hi, box.lo), 0.5)
    w, b = params[last]["weight"], params[last]["bias"]
    raw = T.add_bias(T.matmul(center, T.transpose(w)), b)
    c_out = T.sub_col_pick(raw, labels)
    r_out = T.elided_abs_linear(radius, w, labels)
    return TapedBox(T.sub(c_out, r_out), T.add(c_out, r_out))


def input_box_nodes(tape: T.Tape, box: BoxBounds, batched=False) -> TapedBox:
    lo, hi = box.lo, box.hi
    if not batched:
        lo, hi = lo[None], hi[None]
    return TapedBox(tape.constant(lo), tape.constant(hi))


def propagate_interval(layer, box: BoxBounds, batched=False) -> BoxBounds:
    """Sound one-layer propagation on concrete bounds (no gradients kept)."""
    tape = T.Tape()
    tb = input_box_nodes(tape, box, batched=batched)
    entry = None
    if isinstance(layer, (Affine, Conv2d)):
        entry = {"weight": tape.leaf(layer.weight), "bias": tape.leaf(layer.bias)}
    out = apply_layer_to_box(layer, tb, entry)
    lo, hi = out.lo.value, out.hi.value
    if not batched:
        lo, hi = lo[0], hi[0]
    return BoxBounds(lo, hi)


def ibp_bounds(net: Network, x, y, eps, upto="elided_logits", clip=(0.0, 1.0)) -> BoxBounds:
    """Concrete IBP bounds for one sample.

    ``upto='extractor_output'`` stops at the split; ``'elided_logits'``
    propagates through the whole network with the final layer elided by ``y``.
    """
    box = box_from_ball(np.asarray(x, dtype=np.float64), eps, clip)
    tape = T.Tape()
    params = lift_params(tape, net)
    tb = input_box_nodes(tape, box)
    if upto == "extractor_output":
        out = propagate_box_on_tape(net, params, tb, stop=net.split_index)
    elif upto == "elided_logits":
        out = elided_bounds_on_tape(net, params, tb, np.asarray([y]))
    else:
        raise ValueError(f"unknown upto mode {upto!r}")
    return BoxBounds(out.lo.value[0], out.hi.value[0])
