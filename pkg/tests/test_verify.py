"""Oracle exactness, margin sandwich, method bounds, estimator variance."""

import numpy as np
import pytest

from certitrain.attack import AttackConfig
from certitrain.interval import box_from_ball
from certitrain.net import Affine, Network, ReLU, elide_final_layer, forward_batch
from certitrain.verify import (
    SampleVerdict,
    adversarial_accuracy,
    certify_ibp,
    exact_margin_oracle,
    method_bound,
    variance_theorem_check,
    verdict_json_line,
)

from helpers import random_mlp


def test_certify_eps_zero_correct_sample():
    rng = np.random.default_rng(0)
    net = random_mlp(rng, [4, 8, 3])
    x = rng.uniform(0, 1, size=4)
    y = int(np.argmax(forward_batch(net, x[None])[0]))
    ok, hi = certify_ibp(net, x, y, 0.0)
    assert ok
    assert hi[y] == 0.0


def test_certify_constant_classifier():
    # zero weights: logits equal biases for every input, any radius
    net = Network([Affine(np.zeros((3, 4)), np.array([0.1, 0.9, -0.2]))], 1, 3, (4,))
    x = np.full(4, 0.5)
    assert certify_ibp(net, x, 1, 10.0)[0]
    assert not certify_ibp(net, x, 0, 10.0)[0]


def test_oracle_affine_only_equals_corner_formula():
    rng = np.random.default_rng(1)
    for _ in range(10):
        w = rng.normal(size=(4, 5))
        b = rng.normal(size=4)
        net = Network([Affine(w, b)], 1, 4, (5,))
        x = rng.uniform(0.2, 0.8, size=5)
        y = int(rng.integers(4))
        eps = 0.1
        res = exact_margin_oracle(net, x, y, eps)
        assert res.exact and res.n_unstable == 0
        we = w - w[y]
        be = b - b[y]
        box = box_from_ball(x, eps, (0, 1))
        c, r = box.center, box.radius
        corner = we @ c + np.abs(we) @ r + be
        expect = np.delete(corner, y).max()
        assert abs(res.margin - expect) < 1e-9


def test_oracle_one_relu_hand_enumeration():
    """d(x) = 0.4 relu(x) + 0.6 relu(-x) on [-1, 1]: max is 0.6 at x = -1."""
    layers = [
        Affine(np.array([[1.0], [-1.0]]), np.zeros(2)),
        ReLU(),
        Affine(np.array([[0.0, 0.0], [0.4, 0.6]]), np.zeros(2)),
    ]
    net = Network(layers, len(layers), 2, (1,))
    res = exact_margin_oracle(net, np.array([0.0]), 0, 1.0, clip=None)
    assert res.exact
    assert res.n_unstable == 2
    assert abs(res.margin - 0.6) < 1e-9


def test_oracle_respects_budget():
    rng = np.random.default_rng(2)
    net = random_mlp(rng, [6, 30, 30, 3], scale=3.0)
    res = exact_margin_oracle(net, rng.uniform(0, 1, size=6), 0, 0.3, budget_unstable=5)
    assert res.status == "unknown"
    assert res.margin is None
    assert "budget" in res.reason


def sample_margins(net, x, y, eps, n, seed):
    box = box_from_ball(x, eps, (0, 1))
    pts = box.sample(n, np.random.default_rng(seed))
    elided = elide_final_layer(net, y)
    outs = forward_batch(elided, pts)
    outs[:, y] = -np.inf
    return outs.max(axis=1)


@pytest.mark.parametrize("seed", range(6))
def test_oracle_sandwich_random_tiny_nets(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_mlp(rng, [3, 6, 5, 3], scale=1.8)
    x = rng.uniform(0.1, 0.9, size=3)
    y = int(rng.integers(3))
    eps = 0.06
    res = exact_margin_oracle(net, x, y, eps, budget_unstable=12)
    if not res.exact:
        pytest.skip("instance exceeded unstable budget")
    pgd_margin, _ = method_bound(net, x, y, eps, "pgd",
                                 attack=AttackConfig(steps=60, restarts=3, seed=seed))
    ibp_margin, _ = method_bound(net, x, y, eps, "ibp")
    assert pgd_margin <= res.margin + 1e-9
    assert res.margin <= ibp_margin + 1e-9
    # interior Monte Carlo points can never beat the exact maximum
    assert sample_margins(net, x, y, eps, 2000, seed).max() <= res.margin + 1e-9


def test_certified_implies_negative_exact_margin():
    rng = np.random.default_rng(3)
    found = 0
    for trial in range(40):
        net = random_mlp(rng, [3, 5, 3], scale=0.6)
        x = rng.uniform(0.2, 0.8, size=3)
        y = int(np.argmax(forward_batch(net, x[None])[0]))
        eps = 0.02
        certified, _ = certify_ibp(net, x, y, eps)
        if not certified:
            continue
        res = exact_margin_oracle(net, x, y, eps, budget_unstable=12)
        if res.exact:
            found += 1
            assert res.margin < 0.0
    assert found >= 5


def test_method_bound_signs_against_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for trial in range(12):
        net = random_mlp(rng, [3, 6, 4, 3], scale=1.5, split_relus=1)
        x = rng.uniform(0.2, 0.8, size=3)
        y = int(rng.integers(3))
        eps = 0.05
        res = exact_margin_oracle(net, x, y, eps, budget_unstable=12)
        if not res.exact:
            continue
        checked += 1
        ibp_m, _ = method_bound(net, x, y, eps, "ibp")
        pgd_m, _ = method_bound(net, x, y, eps, "pgd",
                                attack=AttackConfig(steps=40, restarts=2, seed=trial))
        taps_m, _ = method_bound(net, x, y, eps, "taps",
                                 attack=AttackConfig(steps=40, seed=trial))
        sabr_m, _ = method_bound(net, x, y, eps, "sabr", tau_ratio=0.4,
                                 attack=AttackConfig(steps=20, seed=trial))
        assert ibp_m - res.margin >= -1e-9          # sound over-approximation
        assert pgd_m - res.margin <= 1e-9           # feasible-point under-approx
        assert taps_m <= ibp_m + 1e-9               # attacked bound below interval bound
        assert np.isfinite(sabr_m)
    assert checked >= 4


def test_adversarial_accuracy_bounds():
    rng = np.random.default_rng(5)
    net = random_mlp(rng, [4, 10, 3], scale=0.7)
    X = rng.uniform(0, 1, size=(40, 4))
    y = np.argmax(forward_batch(net, X), axis=1)
    eps = 0.03
    adv_acc = adversarial_accuracy(net, X, y, eps, AttackConfig(steps=30, restarts=2, seed=0))
    cert = np.mean([certify_ibp(net, X[i], int(y[i]), eps)[0] for i in range(len(y))])
    nat = 1.0
    assert cert <= adv_acc + 1e-12 <= nat + 1e-12
    assert adversarial_accuracy(net, X, y, 0.0) == 1.0


def variance_setup(seed=0, pool=60):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, [2, 6, 5, 2], scale=1.2, split_relus=1)
    X = rng.uniform(0, 1, size=(pool, 2))
    y = rng.integers(0, 2, size=pool)
    return net, X, y


def test_variance_check_n1_identical_estimators():
    net, X, y = variance_setup()
    rep = variance_theorem_check(net, X, y, 0.05, n=1, trials=50, seed=3,
                                 attack=AttackConfig(steps=3, seed=0))
    np.testing.assert_allclose(rep.mean_avg_then_mul, rep.mean_mul_then_avg, atol=1e-12)
    np.testing.assert_allclose(rep.var_avg_then_mul, rep.var_mul_then_avg, atol=1e-12)
    assert rep.variance_ok_fraction == 1.0


def test_variance_check_constant_bound_branch():
    """If g is constant over the pool both estimators coincide trial-by-trial."""
    net, X, y = variance_setup(seed=1)
    from certitrain import verify as V

    f_vals, g_vals, df, dg = V.per_sample_loss_grads(net, X, y, 0.05,
                                                     attack=AttackConfig(steps=3, seed=0))
    g_const = np.full_like(g_vals, 2.5)
    dg_zero = np.zeros_like(dg)
    rng = np.random.default_rng(7)
    for _ in range(20):
        idx = rng.integers(0, len(f_vals), size=8)
        fb, gb, dfb, dgb = f_vals[idx], g_const[idx], df[idx], dg_zero[idx]
        g1 = gb.mean() * dfb.mean(axis=0) + fb.mean() * dgb.mean(axis=0)
        g2 = (gb[:, None] * dfb + fb[:, None] * dgb).mean(axis=0)
        np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_variance_check_generic_trend():
    """On a trained net the estimator means agree within the per-trial noise
    floor and batch-mean multipliers reduce per-coordinate variance."""
    import tempfile

    from certitrain.data import synthetic_moons
    from certitrain.loss import LossKind
    from certitrain.train import Schedule, TrainConfig, train_run

    train = synthetic_moons(2000, noise=0.06, seed=31)
    pool = synthetic_moons(600, noise=0.06, seed=32)
    cfg = TrainConfig(
        loss=LossKind(tag="ibp"),
        schedule=Schedule(total_epochs=16, annealing_epochs=6, warmup_epochs=1,
                          decay_epochs=(12, 14), lr0=0.01, batch_size=50,
                          eps_target=0.08),
        arch="mlp", hidden=(24, 24), classifier_relus=1, optimizer="adam", seed=0,
        val_attack=AttackConfig(steps=2, seed=0))
    with tempfile.TemporaryDirectory() as tmp:
        net = train_run(cfg, train, tmp)["state"].net
    rep = variance_theorem_check(net, pool.images, pool.labels, 0.08,
                                 n=16, trials=500, seed=11,
                                 attack=AttackConfig(steps=3, seed=0))
    assert rep.mean_agreement_fraction >= 0.95
    assert rep.variance_ok_fraction >= 0.9


def test_variance_check_pool_precondition():
    net, X, y = variance_setup()
    with pytest.raises(ValueError, match="10n"):
        variance_theorem_check(net, X, y, 0.05, n=20, trials=5, seed=0)


def test_verdict_json_round_trip():
    import json

    v = SampleVerdict(sample_id=3, natural_correct=True, ibp_certified=False,
                      pgd_margin=-0.25, exact_margin=None,
                      method_bounds={"ibp": np.array([0.0, 0.5])})
    line = verdict_json_line(v)
    back = json.loads(line)
    assert back["sample_id"] == 3
    assert back["exact_margin"] is None
    assert back["method_bounds"]["ibp"] == [0.0, 0.5]
