"""Architecture assembly, splits, initialization, and elision."""

import numpy as np
import pytest

from certitrain.net import (
    Affine,
    Conv2d,
    Flatten,
    Network,
    ReLU,
    build_architecture,
    elide_final_layer,
    fold_normalization,
    forward_batch,
    forward_concrete,
    init_params,
)
from certitrain.interval import box_from_ball

from helpers import random_mlp


def test_mlp_split_before_last_hidden_affine():
    net = build_architecture("mlp", (784,), 10, classifier_relu_count=1)
    # layers: A R A R A; one classifier ReLU => split before the second affine
    assert [type(l).__name__ for l in net.layers] == ["Affine", "ReLU", "Affine", "ReLU", "Affine"]
    assert net.split_index == 2
    assert [type(l).__name__ for l in net.classifier] == ["Affine", "ReLU", "Affine"]


def test_cnn3_zero_classifier_relus_is_pure_extractor():
    net = build_architecture("cnn3", (1, 28, 28), 10, classifier_relu_count=0)
    assert net.split_index == len(net.layers)
    assert net.relu_count() == 3


def test_cnn7_has_six_relus_and_rejects_seven():
    net = build_architecture("cnn7", (1, 28, 28), 10, classifier_relu_count=6)
    assert net.relu_count() == 6
    assert net.split_index == 0
    with pytest.raises(ValueError, match="classifier_relu_count"):
        build_architecture("cnn7", (1, 28, 28), 10, classifier_relu_count=7)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_architecture("resnet", (3, 32, 32), 10, 1)


def test_classifier_starts_with_linear_map():
    for count in range(4):
        net = build_architecture("cnn3", (1, 28, 28), 10, classifier_relu_count=count)
        if count:
            assert isinstance(net.layers[net.split_index], (Affine, Conv2d))


def test_init_deterministic():
    net = build_architecture("mlp", (20,), 4, 1, hidden=(16, 16))
    a = init_params(net, seed=99)
    b = init_params(net, seed=99)
    for pa, pb in zip(a.param_arrays(), b.param_arrays()):
        assert np.array_equal(pa, pb)


def test_kaiming_variance():
    net = build_architecture("mlp", (100,), 10, 0, hidden=(100, 100))
    samples = []
    for seed in range(10):
        ini = init_params(net, seed=seed, mode="kaiming")
        samples.append(ini.layers[0].weight.ravel())
    w = np.concatenate(samples)
    assert w.size >= 10_000
    np.testing.assert_allclose(w.var(), 2.0 / 100, rtol=0.1)
    for _, name, arr in init_params(net, 0, "kaiming").params():
        if name == "bias":
            assert np.all(arr == 0.0)


def test_ibp_stable_radius_growth():
    """Post-affine box radii stay within 2x of the input radius on average."""
    eps = 0.1
    ratios = []
    for seed in range(20):
        net = init_params(
            build_architecture("mlp", (64,), 8, 0, hidden=(64, 64, 64)), seed, "ibp_stable"
        )
        rng = np.random.default_rng(seed + 1000)
        x = rng.uniform(0.2, 0.8, size=64)
        box = box_from_ball(x, eps, clip=None)
        from certitrain import tensor as T
        from certitrain.interval import input_box_nodes, propagate_box_on_tape
        from certitrain.net import lift_params

        tape = T.Tape()
        params = lift_params(tape, net)
        collected = []
        propagate_box_on_tape(net, params, input_box_nodes(tape, box), collect=collected)
        input_radius = eps
        for idx, b in collected:
            if isinstance(net.layers[idx], Affine):
                radius = 0.5 * (b.hi.value - b.lo.value)
                ratios.append(radius.mean() / input_radius)
    assert np.mean(ratios) <= 2.0, np.mean(ratios)
    assert np.mean(ratios) >= 0.25  # boxes must not collapse either


def test_forward_identity_affine():
    net = Network([Affine(np.eye(2), np.zeros(2))], 0, 2, (2,))
    np.testing.assert_allclose(forward_concrete(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_zero_weights_gives_bias():
    net = Network([Affine(np.zeros((3, 2)), np.array([1.0, -2.0, 0.5]))], 0, 3, (2,))
    np.testing.assert_allclose(forward_concrete(net, np.array([4.0, 5.0])), [1.0, -2.0, 0.5])


def test_forward_matches_manual_composition():
    rng = np.random.default_rng(42)
    net = random_mlp(rng, [5, 7, 6, 3])
    x = rng.normal(size=5)
    h = x.copy()
    for layer in net.layers:
        if isinstance(layer, Affine):
            h = layer.weight @ h + layer.bias
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(forward_concrete(net, x), h, atol=1e-12)


def test_forward_shape_mismatch():
    net = random_mlp(np.random.default_rng(0), [5, 4, 3])
    with pytest.raises(ValueError, match="shape"):
        forward_concrete(net, np.zeros(6))


def test_split_never_changes_forward():
    rng = np.random.default_rng(7)
    net = random_mlp(rng, [6, 8, 8, 4])
    x = rng.normal(size=(3, 6))
    full = forward_batch(net, x)
    for split in range(len(net.layers) + 1):
        latent = forward_batch(net, x, stop=split)
        out = forward_batch(net, latent, start=split)
        np.testing.assert_allclose(out, full, atol=1e-12)


def test_elide_identity_example():
    net = Network([Affine(np.eye(3), np.zeros(3))], 0, 3, (3,))
    elided = elide_final_layer(net, 0)
    np.testing.assert_array_equal(
        elided.layers[-1].weight, [[0, 0, 0], [-1, 1, 0], [-1, 0, 1]]
    )


def test_elide_equals_logit_differences():
    rng = np.random.default_rng(3)
    net = random_mlp(rng, [4, 6, 5])
    for y in range(5):
        elided = elide_final_layer(net, y)
        for _ in range(20):
            x = rng.normal(size=4)
            o = forward_concrete(net, x)
            d = forward_concrete(elided, x)
            np.testing.assert_allclose(d, o - o[y], atol=1e-12)
            assert d[y] == 0.0


def test_elide_label_out_of_range():
    net = random_mlp(np.random.default_rng(0), [4, 3])
    with pytest.raises(ValueError, match="label"):
        elide_final_layer(net, 3)


def test_fold_normalization_round_trip():
    rng = np.random.default_rng(8)
    mean, std = 0.3, 0.27
    net = random_mlp(rng, [6, 8, 3])
    folded = fold_normalization(net, mean, std)
    for _ in range(10):
        x = rng.uniform(0, 1, size=6)
        direct = forward_concrete(net, (x - mean) / std)
        via_fold = forward_concrete(folded, x)
        np.testing.assert_allclose(via_fold, direct, atol=1e-10)


def test_fold_normalization_conv_unpadded():
    rng = np.random.default_rng(9)
    layers = [
        Conv2d(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 1, 0),
        ReLU(),
        Flatten(),
        Affine(rng.normal(size=(2, 4 * 3 * 3)) * 0.1, np.zeros(2)),
    ]
    net = Network(layers, len(layers), 2, (3, 5, 5))
    mean = np.array([0.4, 0.5, 0.2])
    std = np.array([0.2, 0.3, 0.25])
    folded = fold_normalization(net, mean, std)
    x = rng.uniform(0, 1, size=(2, 3, 5, 5))
    direct = forward_batch(net, (x - mean[:, None, None]) / std[:, None, None])
    via_fold = forward_batch(folded, x)
    np.testing.assert_allclose(via_fold, direct, atol=1e-10)


def test_fold_normalization_rejects_padded_conv_shift():
    rng = np.random.default_rng(10)
    layers = [
        Conv2d(rng.normal(size=(2, 1, 3, 3)), np.zeros(2), 1, 1),
        ReLU(),
        Flatten(),
        Affine(rng.normal(size=(2, 2 * 4 * 4)), np.zeros(2)),
    ]
    net = Network(layers, len(layers), 2, (1, 4, 4))
    with pytest.raises(ValueError, match="padded"):
        fold_normalization(net, 0.5, 1.0)
