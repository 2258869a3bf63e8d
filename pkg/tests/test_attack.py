"""PGD attacks: projection safety, determinism, and optimality on easy cases."""

import numpy as np
import pytest

from certitrain.attack import AttackConfig, margin_targets, pgd_input, pgd_latent, sabr_select_region
from certitrain.interval import BoxBounds
from certitrain.net import Affine, Network, forward_batch

from helpers import random_mlp


def linear_net(w, b=None, num_classes=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return Network([Affine(w, b)], 0, num_classes or w.shape[0], (w.shape[1],))


def test_eps_zero_returns_input():
    net = linear_net(np.eye(3))
    x = np.random.default_rng(0).uniform(0, 1, size=(4, 3))
    got = pgd_input(net, x, np.zeros(4, dtype=int), 0.0, AttackConfig(steps=5))
    np.testing.assert_array_equal(got, x)


def test_linear_model_attack_saturates_at_corner():
    # two-class linear model: attacking class 0 pushes along +(w1 - w0); with
    # the auto step size the signed ascent reaches the ball corner from any
    # random init within `steps` updates
    w = np.array([[1.0, -2.0], [3.0, 1.0]])
    net = linear_net(w)
    x = np.array([[0.5, 0.5]])
    cfg = AttackConfig(steps=3, restarts=1, step_size="auto", seed=1)
    adv = pgd_input(net, x, np.array([0]), 0.05, cfg, clip=None)
    direction = np.sign(w[1] - w[0])
    np.testing.assert_allclose(adv, x + 0.05 * direction, atol=1e-9)


def test_attack_stays_in_clipped_ball():
    rng = np.random.default_rng(2)
    net = random_mlp(rng, [5, 8, 3])
    x = rng.uniform(0, 1, size=(20, 5))
    y = rng.integers(0, 3, size=20)
    eps = 0.2
    cfg = AttackConfig(steps=10, restarts=2, seed=3, check_projection=True)
    adv = pgd_input(net, x, y, eps, cfg)
    assert np.all(adv >= np.maximum(x - eps, 0) - 1e-12)
    assert np.all(adv <= np.minimum(x + eps, 1) + 1e-12)


def test_attack_increases_loss_most_of_the_time():
    rng = np.random.default_rng(4)
    hits = trials = 0
    for t in range(10):
        net = random_mlp(rng, [6, 12, 4], scale=2.0)
        x = rng.uniform(0, 1, size=(5, 6))
        y = rng.integers(0, 4, size=5)
        adv = pgd_input(net, x, y, 0.1, AttackConfig(steps=50, seed=t))

        def ce(points):
            logits = forward_batch(net, points)
            m = logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
            return lse - logits[np.arange(len(y)), y]

        hits += int(np.sum(ce(adv) >= ce(x) - 1e-12))
        trials += 5
    assert hits / trials >= 0.95


def test_seeded_determinism():
    rng_data = np.random.default_rng(5)
    net = random_mlp(rng_data, [4, 6, 3])
    x = rng_data.uniform(0, 1, size=(3, 4))
    y = np.array([0, 1, 2])
    cfg = AttackConfig(steps=7, restarts=3, seed=11)
    a = pgd_input(net, x, y, 0.1, cfg)
    b = pgd_input(net, x, y, 0.1, cfg)
    assert np.array_equal(a, b)


def test_latent_degenerate_box_is_identity():
    rng = np.random.default_rng(6)
    net = random_mlp(rng, [4, 6, 5, 3], split_relus=1)
    z = rng.normal(size=(2,) + net.latent_shape)
    box = BoxBounds(z.copy(), z.copy())
    got = pgd_latent(net, box, np.array([0, 1]), AttackConfig(steps=5, seed=0), multi=False)
    np.testing.assert_array_equal(got, z)
    pts, _ = pgd_latent(net, box, np.array([0, 1]), AttackConfig(steps=5, seed=0), multi=True)
    for t in range(pts.shape[1]):
        np.testing.assert_array_equal(pts[:, t], z)


def test_latent_linear_classifier_reaches_corner():
    """Linear objective over a box: optimum is the sign-matched corner."""
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 6))
    layers = [Affine(w, np.zeros(3))]
    net = Network(layers, 0, 3, (6,))
    lo = rng.normal(size=(4, 6))
    hi = lo + rng.uniform(0.5, 1.5, size=(4, 6))
    box = BoxBounds(lo, hi)
    y = np.array([0, 1, 2, 0])
    cfg = AttackConfig(steps=50, restarts=1, seed=8)
    pts, tgts = pgd_latent(net, box, y, cfg, multi=True)
    for b in range(4):
        for t in range(tgts.shape[1]):
            v = w[tgts[b, t]] - w[y[b]]
            corner = np.where(v > 0, hi[b], lo[b])
            exact = v @ corner
            got = v @ pts[b, t]
            assert got <= exact + 1e-9
            assert exact - got < 1e-6, (exact, got)


def test_multi_estimator_dominates_single_on_grid():
    """Per-target exact maxima dominate the single point's logit differences."""
    rng = np.random.default_rng(9)
    net = random_mlp(rng, [2, 6, 2], scale=2.0, split_relus=1)
    assert net.latent_shape == (2,)
    lo = np.array([[-0.5, -0.5]])
    hi = np.array([[0.7, 0.9]])
    y = np.array([0])

    # grid-exact maxima over the 2-D latent box
    g = np.linspace(0, 1, 41)
    gx, gy = np.meshgrid(g, g)
    pts = np.stack([lo[0, 0] + gx.ravel() * (hi[0, 0] - lo[0, 0]),
                    lo[0, 1] + gy.ravel() * (hi[0, 1] - lo[0, 1])], axis=1)
    logits = forward_batch(net, pts, start=net.split_index)
    diffs = logits[:, 1] - logits[:, 0]
    grid_max = diffs.max()

    # the CE-optimal single point cannot beat the per-target max
    ce = np.log1p(np.exp(np.clip(diffs, -500, 500)))
    single_diff = diffs[np.argmax(ce)]
    assert grid_max >= single_diff - 1e-12


def test_sabr_region_subset_and_limits():
    rng = np.random.default_rng(10)
    net = random_mlp(rng, [5, 8, 3])
    x = rng.uniform(0, 1, size=(8, 5))
    y = rng.integers(0, 3, size=8)
    eps = 0.2

    # tau == eps: no shrink attack, centered at x
    region = sabr_select_region(net, x, y, eps, eps, AttackConfig(steps=3, seed=0))
    np.testing.assert_allclose(region.lo, np.maximum(x - eps, 0))
    np.testing.assert_allclose(region.hi, np.minimum(x + eps, 1))

    # tau/eps = 0.1: radius is 0.1 * eps away from clipping
    tau = 0.1 * eps
    region = sabr_select_region(net, x, y, eps, tau, AttackConfig(steps=5, seed=1))
    interior = (region.lo > 0) & (region.hi < 1)
    np.testing.assert_allclose((region.hi - region.lo)[interior], 2 * tau, atol=1e-9)

    # containment in the full clipped ball, many random draws
    for seed in range(5):
        region = sabr_select_region(net, x, y, eps, tau, AttackConfig(steps=8, seed=seed))
        assert np.all(region.lo >= np.maximum(x - eps, 0) - 1e-12)
        assert np.all(region.hi <= np.minimum(x + eps, 1) + 1e-12)


def test_logit_diff_objective_targets_one_class():
    # maximizing o_target - o_y on a linear model moves along w_t - w_y
    w = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    net = linear_net(w)
    x = np.array([[0.5, 0.5]])
    cfg = AttackConfig(steps=3, step_size="auto", objective=("logit_diff", 2), seed=0)
    adv = pgd_input(net, x, np.array([0]), 0.05, cfg, clip=None)
    np.testing.assert_allclose(adv, x + 0.05 * np.sign(w[2] - w[0]), atol=1e-9)


def test_sabr_invalid_tau():
    net = linear_net(np.eye(2))
    with pytest.raises(ValueError, match="tau"):
        sabr_select_region(net, np.zeros((1, 2)), np.array([0]), 0.1, 0.2, AttackConfig())


def test_margin_targets():
    t = margin_targets(4, np.array([0, 2]))
    np.testing.assert_array_equal(t, [[1, 2, 3], [0, 1, 3]])
