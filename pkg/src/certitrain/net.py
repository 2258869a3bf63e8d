"""Layer and network definitions, initialization, and concrete evaluation.

A :class:`Network` is an ordered list of layers plus a ``split_index``
separating the feature extractor ``layers[:split_index]`` from the classifier
``layers[split_index:]``.  Networks are immutable: parameter updates go
through :meth:`Network.with_params`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T

__all__ = [
    "Affine",
    "Conv2d",
    "ReLU",
    "Flatten",
    "Network",
    "build_architecture",
    "init_params",
    "forward_concrete",
    "forward_batch",
    "elide_final_layer",
    "fold_normalization",
    "lift_params",
    "forward_on_tape",
]


@dataclass(frozen=True)
class Affine:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    @property
    def out_features(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray    # (out_ch,)
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


def _layer_params(layer):
    if isinstance(layer, (Affine, Conv2d)):
        return [("weight", layer.weight), ("bias", layer.bias)]
    return []


def _out_shape(layer, in_shape):
    if isinstance(layer, Affine):
        if in_shape != (layer.weight.shape[1],):
            raise ValueError(f"affine expects input {layer.weight.shape[1]}, got {in_shape}")
        return (layer.weight.shape[0],)
    if isinstance(layer, Conv2d):
        if len(in_shape) != 3 or in_shape[0] != layer.weight.shape[1]:
            raise ValueError(f"conv expects (C,H,W) with C={layer.weight.shape[1]}, got {in_shape}")
        oh, ow = T._conv_geometry((1,) + in_shape, layer.weight.shape, layer.stride, layer.padding)
        return (layer.weight.shape[0], oh, ow)
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    return in_shape


class Network:
    """Immutable layer stack with an extractor/classifier split."""

    def __init__(self, layers, split_index, num_classes, input_shape):
        layers = tuple(layers)
        if not layers or not isinstance(layers[-1], Affine):
            raise ValueError("network must end with an affine layer")
        if layers[-1].out_features != num_classes:
            raise ValueError(
                f"final affine has {layers[-1].out_features} outputs, expected {num_classes}"
            )
        if not 0 <= split_index <= len(layers):
            raise ValueError(f"split_index {split_index} out of range")
        shape = tuple(input_shape)
        self._layer_shapes = [shape]
        for layer in layers:
            shape = _out_shape(layer, shape)
            self._layer_shapes.append(shape)
        self.layers = layers
        self.split_index = int(split_index)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)

    @property
    def extractor(self):
        return self.layers[: self.split_index]

    @property
    def classifier(self):
        return self.layers[self.split_index :]

    @property
    def latent_shape(self):
        """Output shape of the feature extractor (one sample)."""
        return self._layer_shapes[self.split_index]

    def shape_after(self, layer_index):
        return self._layer_shapes[layer_index]

    def params(self):
        """Yield (layer_index, name, array) in declaration order."""
        for i, layer in enumerate(self.layers):
            for name, arr in _layer_params(layer):
                yield i, name, arr

    def param_arrays(self):
        return [arr for _, _, arr in self.params()]

    def with_params(self, arrays) -> "Network":
        """Rebind parameter arrays (same declaration order) into a new network."""
        arrays = list(arrays)
        it = iter(arrays)
        new_layers = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                new_layers.append(replace(layer, weight=next(it), bias=next(it)))
            elif isinstance(layer, Conv2d):
                new_layers.append(replace(layer, weight=next(it), bias=next(it)))
            else:
                new_layers.append(layer)
        try:
            next(it)
        except StopIteration:
            pass
        else:
            raise ValueError("too many parameter arrays")
        return Network(new_layers, self.split_index, self.num_classes, self.input_shape)

    def with_split(self, split_index) -> "Network":
        return Network(self.layers, split_index, self.num_classes, self.input_shape)

    def relu_count(self):
        return sum(isinstance(l, ReLU) for l in self.layers)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

def _mlp_layers(input_dim, hidden, num_classes):
    dims = [input_dim] + list(hidden)
    layers = []
    for a, b in zip(dims, dims[1:]):
        layers.append(Affine(np.zeros((b, a)), np.zeros(b)))
        layers.append(ReLU())
    layers.append(Affine(np.zeros((num_classes, dims[-1])), np.zeros(num_classes)))
    return layers


def _conv_stack(input_shape, spec, num_classes):
    """spec: list of ('conv', out_ch, k, stride, pad) / ('fc', width) entries."""
    layers = []
    shape = tuple(input_shape)
    for entry in spec:
        if entry[0] == "conv":
            _, oc, k, stride, pad = entry
            layers.append(Conv2d(np.zeros((oc, shape[0], k, k)), np.zeros(oc), stride, pad))
            shape = _out_shape(layers[-1], shape)
            layers.append(ReLU())
        else:
            _, width = entry
            if len(shape) > 1:
                layers.append(Flatten())
                shape = _out_shape(layers[-1], shape)
            layers.append(Affine(np.zeros((width, shape[0])), np.zeros(width)))
            shape = (width,)
            layers.append(ReLU())
    if len(shape) > 1:
        layers.append(Flatten())
        shape = _out_shape(layers[-1], shape)
    layers.append(Affine(np.zeros((num_classes, shape[0])), np.zeros(num_classes)))
    return layers


def split_for_classifier_relus(layers, classifier_relu_count):
    """Split index such that the classifier holds exactly the last N ReLU layers.

    The split lands immediately before the affine/conv layer feeding the
    first classifier ReLU, so the classifier always starts with a linear map.
    A count of zero puts the whole network in the extractor.
    """
    relu_positions = [i for i, l in enumerate(layers) if isinstance(l, ReLU)]
    if classifier_relu_count < 0 or classifier_relu_count > len(relu_positions):
        raise ValueError(
            f"classifier_relu_count={classifier_relu_count} but network has "
            f"{len(relu_positions)} ReLU layers"
        )
    if classifier_relu_count == 0:
        return len(layers)
    first_relu = relu_positions[-classifier_relu_count]
    split = first_relu - 1
    while split > 0 and not isinstance(layers[split], (Affine, Conv2d)):
        split -= 1
    if not isinstance(layers[split], (Affine, Conv2d)):
        raise ValueError("no linear layer precedes the requested classifier ReLU")
    return split


ARCHITECTURES = ("mlp", "cnn3", "cnn7")


def build_architecture(name, input_shape, num_classes, classifier_relu_count, hidden=(128, 128)):
    """Assemble a named architecture with the requested classifier split.

    ``mlp``: affine stack with the given hidden widths.
    ``cnn3``: Conv(16,4x4,s2,p1) - Conv(32,4x4,s2,p1) - FC(100) - FC(out), 3 ReLUs.
    ``cnn7``: five 3x3 convs (64,64,128,128,128; stride 2 on the third) and
    two FC layers (512, out), 6 ReLUs.  No batch normalization anywhere.
    """
    input_shape = tuple(int(s) for s in input_shape)
    if name == "mlp":
        layers = _mlp_layers(int(np.prod(input_shape)), hidden, num_classes)
        if len(input_shape) != 1:
            layers = [Flatten()] + layers
    elif name == "cnn3":
        layers = _conv_stack(
            input_shape,
            [("conv", 16, 4, 2, 1), ("conv", 32, 4, 2, 1), ("fc", 100)],
            num_classes,
        )
    elif name == "cnn7":
        layers = _conv_stack(
            input_shape,
            [
                ("conv", 64, 3, 1, 1),
                ("conv", 64, 3, 1, 1),
                ("conv", 128, 3, 2, 1),
                ("conv", 128, 3, 1, 1),
                ("conv", 128, 3, 1, 1),
                ("fc", 512),
            ],
            num_classes,
        )
    else:
        raise ValueError(f"unknown architecture {name!r} (expected one of {ARCHITECTURES})")
    split = split_for_classifier_relus(layers, classifier_relu_count)
    return Network(layers, split, num_classes, input_shape)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

# Mean |W| per fan-in unit for the box-stability init.  Box radii grow by
# roughly fan_in * E|W| through an affine layer and shrink by ~2x through a
# centered ReLU, so values near 2 keep radii flat with depth; we stay a
# little below to keep the post-affine radius within 2x of the input radius.
_STABLE_MEAN_ABS = 1.8


def _fan_in(layer):
    if isinstance(layer, Affine):
        return layer.weight.shape[1]
    return int(np.prod(layer.weight.shape[1:]))


def init_params(net: Network, seed, mode="ibp_stable") -> Network:
    """Draw fresh parameters: zero-mean normal weights, zero biases.

    ``ibp_stable`` scales weights so interval radii stay roughly constant
    with depth; ``kaiming`` uses variance 2/fan_in.
    """
    if mode not in ("ibp_stable", "kaiming"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    arrays = []
    for layer in net.layers:
        if not isinstance(layer, (Affine, Conv2d)):
            continue
        fan_in = _fan_in(layer)
        if mode == "kaiming":
            sigma = np.sqrt(2.0 / fan_in)
        else:
            # E|N(0, s^2)| = s * sqrt(2/pi); solve for E|W| = _STABLE_MEAN_ABS / fan_in.
            sigma = _STABLE_MEAN_ABS * np.sqrt(np.pi / 2.0) / fan_in
        arrays.append(rng.normal(0.0, sigma, size=layer.weight.shape))
        arrays.append(np.zeros_like(layer.bias))
    return net.with_params(arrays)


# ---------------------------------------------------------------------------
# Concrete evaluation
# ---------------------------------------------------------------------------

def _apply_layer(layer, x):
    if isinstance(layer, Affine):
        return x @ layer.weight.T + layer.bias
    if isinstance(layer, Conv2d):
        cols = T.im2col(x, layer.weight.shape[2], layer.weight.shape[3], layer.stride, layer.padding)
        wmat = layer.weight.reshape(layer.weight.shape[0], -1)
        oh, ow = T._conv_geometry(x.shape, layer.weight.shape, layer.stride, layer.padding)
        out = np.einsum("ok,bkl->bol", wmat, cols, optimize=True)
        return out.reshape(x.shape[0], -1, oh, ow) + layer.bias[None, :, None, None]
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unknown layer {layer!r}")


def forward_batch(net: Network, x, start=0, stop=None) -> np.ndarray:
    """Evaluate layers[start:stop] on a batched input (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    for layer in net.layers[start : stop if stop is not None else len(net.layers)]:
        x = _apply_layer(layer, x)
    return x


def forward_concrete(net: Network, x) -> np.ndarray:
    """Logits for a single sample shaped like ``net.input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ValueError(f"input shape {x.shape} != expected {net.input_shape}")
    return forward_batch(net, x[None])[0]


def elide_final_layer(net: Network, y: int) -> Network:
    """Fold the logit-difference map into the final affine layer.

    Row i of the new layer computes logit_i - logit_y, so output y is
    identically zero and an upper bound below zero on every other output
    certifies the label.
    """
    if not 0 <= y < net.num_classes:
        raise ValueError(f"label {y} out of range for {net.num_classes} classes")
    last = net.layers[-1]
    weight = last.weight - last.weight[y][None, :]
    bias = last.bias - last.bias[y]
    layers = net.layers[:-1] + (Affine(weight, bias),)
    return Network(layers, net.split_index, net.num_classes, net.input_shape)


def fold_normalization(net: Network, mean, std) -> Network:
    """Merge input standardization (x - mean) / std into the first linear layer.

    Exact for an affine first layer, and for a conv first layer without
    padding.  A padded conv cannot absorb the shift (zero padding is not a
    normalized value), so that case is rejected rather than silently wrong.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    first = net.layers[0]
    if isinstance(first, Conv2d) and first.padding and np.any(mean != 0.0):
        raise ValueError("cannot fold a nonzero mean into a padded convolution")
    if isinstance(first, Affine):
        m = np.broadcast_to(mean, (net.input_shape[0],)).ravel()
        s = np.broadcast_to(std, (net.input_shape[0],)).ravel()
        weight = first.weight / s[None, :]
        bias = first.bias - weight @ m
        new_first = Affine(weight, bias)
    elif isinstance(first, Conv2d):
        c = net.input_shape[0]
        m = np.broadcast_to(mean, (c,))
        s = np.broadcast_to(std, (c,))
        weight = first.weight / s[None, :, None, None]
        bias = first.bias - np.einsum("ocij,c->o", weight, m)
        new_first = Conv2d(weight, bias, first.stride, first.padding)
    else:
        raise ValueError("first layer must be affine or conv to fold normalization")
    return Network((new_first,) + net.layers[1:], net.split_index, net.num_classes, net.input_shape)


def forward_backward_input(net: Network, x, seed_grad, start=0, stop=None):
    """Forward through layers[start:stop] plus the input gradient only.

    Attack inner loops need d(objective)/d(input) but never parameter
    gradients; skipping the weight-gradient products roughly halves the cost
    of a PGD step.  ``seed_grad(out) -> (objective_values, d_out)`` supplies
    the output-side gradient.  Returns (objective_values, d_input).
    """
    stop = len(net.layers) if stop is None else stop
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    for layer in net.layers[start:stop]:
        acts.append(_apply_layer(layer, acts[-1]))
    values, g = seed_grad(acts[-1])
    for i in range(stop - 1, start - 1, -1):
        layer = net.layers[i]
        a_in = acts[i - start]
        if isinstance(layer, Affine):
            g = g @ layer.weight
        elif isinstance(layer, Conv2d):
            kh, kw = layer.weight.shape[2], layer.weight.shape[3]
            wmat = layer.weight.reshape(layer.weight.shape[0], -1)
            gm = g.reshape(g.shape[0], g.shape[1], -1)
            dcols = np.einsum("ok,bol->bkl", wmat, gm, optimize=True)
            g = T.col2im(dcols, a_in.shape, kh, kw, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            g = g * (a_in > 0.0)
        elif isinstance(layer, Flatten):
            g = g.reshape(a_in.shape)
    return values, g


# ---------------------------------------------------------------------------
# Tape plumbing
# ---------------------------------------------------------------------------

def lift_params(tape: T.Tape, net: Network):
    """Create one leaf node per parameter array; returns per-layer node dicts."""
    nodes = []
    for layer in net.layers:
        if isinstance(layer, (Affine, Conv2d)):
            nodes.append({
                "weight": tape.leaf(layer.weight, op="param"),
                "bias": tape.leaf(layer.bias, op="param"),
            })
        else:
            nodes.append(None)
    return nodes


def forward_on_tape(net: Network, params, x: T.Node, start=0, stop=None) -> T.Node:
    """Differentiable batched forward through layers[start:stop].

    ``params`` comes from :func:`lift_params` (so parameter gradients are
    addressable); ``x`` is a (B, ...) node on the same tape.
    """
    stop = len(net.layers) if stop is None else stop
    out = x
    for i in range(start, stop):
        layer = net.layers[i]
        if isinstance(layer, Affine):
            out = T.add_bias(T.matmul(out, T.transpose(params[i]["weight"])), params[i]["bias"])
        elif isinstance(layer, Conv2d):
            out = T.conv2d(out, params[i]["weight"], params[i]["bias"], layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            out = T.relu(out)
        elif isinstance(layer, Flatten):
            out = T.reshape(out, (out.value.shape[0], -1))
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return out
