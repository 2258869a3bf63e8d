"""Shared builders for randomized test networks."""

import numpy as np

from certitrain.net import Affine, Conv2d, Flatten, Network, ReLU


def random_mlp(rng, dims, num_classes=None, scale=1.0, split_relus=0):
    """Random MLP with the given layer widths; dims = [in, h1, ..., out]."""
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(Affine(rng.normal(size=(b, a)) * scale / np.sqrt(a), rng.normal(size=b) * 0.1))
        if i < len(dims) - 2:
            layers.append(ReLU())
    from certitrain.net import split_for_classifier_relus

    split = split_for_classifier_relus(layers, split_relus)
    return Network(layers, split, num_classes or dims[-1], (dims[0],))


def random_cnn(rng, in_shape=(1, 6, 6), channels=(3,), fc=8, num_classes=3, scale=1.0):
    """Tiny random conv net for interval/gradient tests."""
    layers = []
    c = in_shape[0]
    for oc in channels:
        fan = c * 9
        layers.append(Conv2d(rng.normal(size=(oc, c, 3, 3)) * scale / np.sqrt(fan), rng.normal(size=oc) * 0.1, 1, 1))
        layers.append(ReLU())
        c = oc
    layers.append(Flatten())
    feat = c * in_shape[1] * in_shape[2]
    layers.append(Affine(rng.normal(size=(fc, feat)) * scale / np.sqrt(feat), rng.normal(size=fc) * 0.1))
    layers.append(ReLU())
    layers.append(Affine(rng.normal(size=(num_classes, fc)) * scale / np.sqrt(fc), rng.normal(size=num_classes) * 0.1))
    return Network(layers, len(layers), num_classes, in_shape)
