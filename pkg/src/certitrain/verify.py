"""Certification, exact small-network margin oracle, and paired-estimator
variance experiments.

The oracle enumerates activation patterns of interval-unstable ReLUs only
(stable ones are fixed by a sound prescreen).  Within one pattern the network
is affine, so each elided-logit maximum over the input box intersected with
the pattern's halfspaces is an LP; with no branched constraints the maximum
is the closed-form corner value.  Budgets turn excessive instances into an
explicit Unknown, never a wrong number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import tensor as T
from .attack import AttackConfig, pgd_input, pgd_latent, sabr_select_region
from .interval import BoxBounds, box_from_ball, elided_bounds_on_tape, input_box_nodes, propagate_box_on_tape
from .loss import paired_loss_terms
from .net import Affine, Conv2d, Flatten, Network, ReLU, elide_final_layer, forward_batch, lift_params

__all__ = [
    "certify_ibp",
    "OracleResult",
    "exact_margin_oracle",
    "method_bound",
    "adversarial_accuracy",
    "variance_theorem_check",
    "VarianceReport",
    "SampleVerdict",
    "verdict_json_line",
]


# ---------------------------------------------------------------------------
# Plain interval certification
# ---------------------------------------------------------------------------

def upper_logit_diffs(net: Network, x, y, eps, clip=(0.0, 1.0)) -> np.ndarray:
    from .interval import ibp_bounds

    return ibp_bounds(net, x, y, eps, upto="elided_logits", clip=clip).hi


def certify_ibp(net: Network, x, y, eps, clip=(0.0, 1.0)):
    """(certified, upper logit-difference vector) for one sample."""
    hi = upper_logit_diffs(net, x, y, eps, clip)
    others = np.delete(hi, y)
    return bool(others.max() < 0.0), hi


# ---------------------------------------------------------------------------
# Exact margin oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    status: str                  # "exact" or "unknown"
    margin: float | None
    n_unstable: int
    n_patterns: int
    reason: str = ""

    @property
    def exact(self):
        return self.status == "exact"


def _affine_operator(layer, in_shape):
    """(matrix, offset) of a layer's affine action on flattened features."""
    if isinstance(layer, Affine):
        return layer.weight, layer.bias
    if isinstance(layer, Conv2d):
        d = int(np.prod(in_shape))
        zero = forward_batch_single_layer(layer, np.zeros((1,) + tuple(in_shape)))
        basis = forward_batch_single_layer(layer, np.eye(d).reshape((d,) + tuple(in_shape)))
        v = zero.reshape(-1)
        m = (basis.reshape(d, -1) - v[None, :]).T
        return m, v
    raise TypeError(f"no affine operator for {layer!r}")


def forward_batch_single_layer(layer, x):
    from .net import _apply_layer

    return _apply_layer(layer, x)


def _interval_of_rows(m, v, center, radius):
    c = m @ center + v
    r = np.abs(m) @ radius
    return c - r, c + r


def exact_margin_oracle(net: Network, x, y, eps, budget_unstable=20,
                        max_patterns=200_000, clip=(0.0, 1.0)) -> OracleResult:
    """Exact worst-case margin max over the box of max_{i != y} (o_i - o_y).

    Enumerates activation patterns of unstable ReLUs; per pattern solves one
    LP per wrong class (or the corner formula when the pattern imposes no
    constraints).  Returns Unknown when the instance exceeds the budgets.
    """
    x = np.asarray(x, dtype=np.float64)
    elided = elide_final_layer(net, y)
    box = box_from_ball(x, eps, clip)
    lo0 = box.lo.reshape(-1)
    hi0 = box.hi.reshape(-1)
    center = 0.5 * (lo0 + hi0)
    radius = 0.5 * (hi0 - lo0)
    d = lo0.size

    # sound prescreen: the layerwise interval pass classifies every ReLU unit
    # against the true (nonlinear) prefix; only straddling units may branch
    tape = T.Tape()
    params = lift_params(tape, elided)
    collected = []
    propagate_box_on_tape(elided, params, input_box_nodes(tape, box), collect=collected)
    unstable_count = 0
    global_state = {}  # relu layer index -> (active_mask, dead_mask, unstable_mask)
    prev = None
    for idx, b in collected:
        if isinstance(elided.layers[idx], ReLU) and prev is not None:
            lo_pre, hi_pre = prev[0][0].reshape(-1), prev[1][0].reshape(-1)
            active = lo_pre >= 0.0
            dead = hi_pre <= 0.0
            unstable = ~(active | dead)
            global_state[idx] = (active, dead, unstable)
            unstable_count += int(unstable.sum())
        prev = (b.lo.value, b.hi.value)
    if unstable_count > budget_unstable:
        return OracleResult("unknown", None, unstable_count, 0,
                            f"{unstable_count} unstable ReLUs exceed budget {budget_unstable}")

    # affine operators per layer, on flattened features
    ops = []
    shape = elided.input_shape
    for layer in elided.layers:
        if isinstance(layer, (Affine, Conv2d)):
            ops.append(_affine_operator(layer, shape))
        else:
            ops.append(None)
        from .net import _out_shape

        shape = _out_shape(layer, shape)

    best = -np.inf
    patterns = 0
    budget_hit = False

    def solve_leaf(m, v, constraints):
        nonlocal best
        rows = [i for i in range(elided.num_classes) if i != y]
        if not constraints:
            vals = m[rows] @ center + np.abs(m[rows]) @ radius + v[rows]
            best = max(best, float(vals.max()))
            return
        a_ub = -np.stack([w for w, _ in constraints])
        b_ub = np.array([c for _, c in constraints])
        for i in rows:
            res = linprog(-m[i], A_ub=a_ub, b_ub=b_ub,
                          bounds=list(zip(lo0, hi0)), method="highs")
            if res.status == 2:  # infeasible pattern
                return
            if res.status != 0:
                raise RuntimeError(f"LP solver failure: status {res.status}")
            best = max(best, float(m[i] @ res.x + v[i]))

    def walk(layer_idx, m, v, constraints):
        nonlocal patterns, budget_hit
        if budget_hit:
            return
        if layer_idx == len(elided.layers):
            patterns += 1
            if patterns > max_patterns:
                budget_hit = True
                return
            solve_leaf(m, v, constraints)
            return
        layer = elided.layers[layer_idx]
        if isinstance(layer, (Affine, Conv2d)):
            w, b = ops[layer_idx]
            walk(layer_idx + 1, w @ m, w @ v + b, constraints)
        elif isinstance(layer, Flatten):
            walk(layer_idx + 1, m, v, constraints)
        elif isinstance(layer, ReLU):
            g_active, g_dead, g_unstable = global_state[layer_idx]
            lo_pre, hi_pre = _interval_of_rows(m, v, center, radius)
            # the global verdict is authoritative for stable units; globally
            # unstable units may still be resolved by this branch's tighter
            # composed-map interval, otherwise they branch
            fixed_active = g_active | (g_unstable & (lo_pre >= 0.0))
            fixed_dead = g_dead | (g_unstable & ~fixed_active & (hi_pre <= 0.0))
            branch_idx = np.nonzero(g_unstable & ~fixed_active & ~fixed_dead)[0]

            def expand(k, mask_rows, constr):
                if budget_hit:
                    return
                if k == len(branch_idx):
                    walk(layer_idx + 1, m * mask_rows[:, None], v * mask_rows, constr)
                    return
                j = branch_idx[k]
                # active branch: pre-activation >= 0
                expand(k + 1, mask_rows, constr + [(m[j], v[j])])
                # inactive branch: pre-activation <= 0, unit output zeroed
                dead = mask_rows.copy()
                dead[j] = 0.0
                expand(k + 1, dead, constr + [(-m[j], -v[j])])

            base_mask = (~fixed_dead).astype(np.float64)
            expand(0, base_mask, constraints)
        else:
            raise TypeError(f"unexpected layer {layer!r}")

    walk(0, np.eye(d), np.zeros(d), [])
    if budget_hit:
        return OracleResult("unknown", None, unstable_count, patterns,
                            f"pattern count exceeded {max_patterns}")
    return OracleResult("exact", best, unstable_count, patterns)


# ---------------------------------------------------------------------------
# Margin approximations per method
# ---------------------------------------------------------------------------

def margin_of_diffs(diffs, y):
    others = np.delete(np.asarray(diffs, dtype=np.float64), y)
    return float(others.max())


def method_bound(net: Network, x, y, eps, method, attack=None, tau_ratio=0.4,
                 rng=None, clip=(0.0, 1.0)):
    """(margin approximation, logit-difference vector) for one method.

    ``ibp`` is a sound upper bound, ``pgd`` a feasible-point value (an
    under-approximation), ``sabr``/``taps`` may err on either side.
    """
    x = np.asarray(x, dtype=np.float64)
    if method == "ibp":
        hi = upper_logit_diffs(net, x, y, eps, clip)
        return margin_of_diffs(hi, y), hi
    if method == "pgd":
        cfg = attack or AttackConfig(steps=50, restarts=3, seed=0)
        adv = pgd_input(net, x[None], np.asarray([y]), eps, cfg, rng=rng, clip=clip)[0]
        logits = forward_batch(net, adv[None])[0]
        diffs = logits - logits[y]
        return margin_of_diffs(diffs, y), diffs
    if method == "sabr":
        cfg = attack or AttackConfig(steps=50, restarts=1, seed=0)
        region = sabr_select_region(net, x[None], np.asarray([y]), eps, tau_ratio * eps,
                                    cfg, rng=rng, clip=clip)
        tape = T.Tape()
        params = lift_params(tape, net)
        tb = input_box_nodes(tape, BoxBounds(region.lo[0], region.hi[0]))
        hi = elided_bounds_on_tape(net, params, tb, np.asarray([y])).hi.value[0]
        return margin_of_diffs(hi, y), hi
    if method == "taps":
        cfg = attack or AttackConfig(steps=50, restarts=1, seed=0)
        if net.split_index >= len(net.layers):
            hi = upper_logit_diffs(net, x, y, eps, clip)
            return margin_of_diffs(hi, y), hi
        tape = T.Tape()
        params = lift_params(tape, net)
        box = box_from_ball(x, eps, clip)
        latent = propagate_box_on_tape(net, params, input_box_nodes(tape, box),
                                       stop=net.split_index)
        latent_box = BoxBounds(latent.lo.value, latent.hi.value)
        points, targets = pgd_latent(net, latent_box, np.asarray([y]), cfg,
                                     multi=True, rng=rng)
        flat = points[0]
        logits = forward_batch(net, flat, start=net.split_index)
        estimates = logits[np.arange(targets.shape[1]), targets[0]] - logits[:, y]
        diffs = np.zeros(net.num_classes)
        diffs[targets[0]] = estimates
        return float(estimates.max()), diffs
    raise ValueError(f"unknown method {method!r}")


def adversarial_accuracy(net: Network, X, y, eps, attack=None, rng=None,
                         clip=(0.0, 1.0), chunk=256) -> float:
    """Fraction surviving the strongest found attack (upper bound on robustness)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    cfg = attack or AttackConfig(steps=200, restarts=5, seed=0)
    correct = 0
    for start in range(0, X.shape[0], chunk):
        xs, ys = X[start : start + chunk], y[start : start + chunk]
        adv = xs if eps == 0.0 else pgd_input(net, xs, ys, eps, cfg, rng=rng, clip=clip)
        logits = forward_batch(net, adv)
        correct += int(np.sum(np.argmax(logits, axis=1) == ys))
    return correct / X.shape[0]


# ---------------------------------------------------------------------------
# Batch-mean vs per-sample product gradient estimators
# ---------------------------------------------------------------------------

@dataclass
class VarianceReport:
    mean_avg_then_mul: np.ndarray
    mean_mul_then_avg: np.ndarray
    se_diff: np.ndarray          # paired standard error of the per-trial difference
    var_avg_then_mul: np.ndarray
    var_mul_then_avg: np.ndarray
    trials: int

    @property
    def noise_floor(self):
        """Per-trial spread of the two estimators combined."""
        return np.sqrt(self.var_avg_then_mul + self.var_mul_then_avg)

    @property
    def mean_agreement_fraction(self):
        """Fraction of coordinates whose mean difference stays within three
        units of the estimators' own per-trial noise.

        The theorem's exact mean equality rests on an independence idealization
        real networks violate by a covariance term, so the meaningful empirical
        statement is that the systematic difference is buried in the noise a
        single batch gradient already carries.
        """
        diff = np.abs(self.mean_avg_then_mul - self.mean_mul_then_avg)
        return float(np.mean(diff <= 3.0 * self.noise_floor + 1e-15))

    @property
    def variance_ok_fraction(self):
        return float(np.mean(self.var_avg_then_mul <= self.var_mul_then_avg + 1e-15))


def per_sample_loss_grads(net: Network, X, y, eps, *, multi=True, connector=None,
                          attack=None, rng=None, clip=(0.0, 1.0)):
    """Per-sample (attacked value, bound value, their gradients), attack frozen.

    One tape per sample; the same latent points serve both branch gradients,
    matching how the training estimators share the forward pass.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    f_vals, g_vals, f_grads, g_grads = [], [], [], []
    for i in range(X.shape[0]):
        tape = T.Tape()
        params = lift_params(tape, net)
        bound, attacked = paired_loss_terms(
            tape, net, params, X[i : i + 1], y[i : i + 1], eps,
            multi=multi, connector=connector, attack=attack, rng=rng, clip=clip)
        param_ids = [e[n].id for e in params if e for n in ("weight", "bias")]
        gf = T.backward(tape, T.mean_all(attacked), wanted=param_ids)
        gg = T.backward(tape, T.mean_all(bound), wanted=param_ids)
        flat_f = np.concatenate([gf[nid].ravel() for nid in param_ids])
        flat_g = np.concatenate([gg[nid].ravel() for nid in param_ids])
        f_vals.append(float(attacked.value[0]))
        g_vals.append(float(bound.value[0]))
        f_grads.append(flat_f)
        g_grads.append(flat_g)
    return (np.array(f_vals), np.array(g_vals),
            np.stack(f_grads), np.stack(g_grads))


def variance_theorem_check(net: Network, X_pool, y_pool, eps, n, trials, seed,
                           *, multi=True, connector=None, attack=None,
                           clip=(0.0, 1.0)) -> VarianceReport:
    """Monte Carlo comparison of the two product-gradient estimators.

    For bootstrap batches of size n, computes the gradient of
    mean(f) * mean(g) (multipliers averaged first) and of mean(f * g)
    (per-sample products), with f the attacked loss and g the bound loss and
    all latent points frozen per pool sample.
    """
    if len(X_pool) < 10 * n:
        raise ValueError("pool should hold at least 10n samples")
    rng = np.random.default_rng(seed)
    f, g, df, dg = per_sample_loss_grads(net, X_pool, y_pool, eps, multi=multi,
                                         connector=connector, attack=attack,
                                         rng=rng, clip=clip)
    pool = len(f)
    p = df.shape[1]
    sum1 = np.zeros(p)
    sumsq1 = np.zeros(p)
    sum2 = np.zeros(p)
    sumsq2 = np.zeros(p)
    sum_d = np.zeros(p)
    sumsq_d = np.zeros(p)
    for _ in range(trials):
        idx = rng.integers(0, pool, size=n)
        fb, gb = f[idx], g[idx]
        dfb, dgb = df[idx], dg[idx]
        g1 = gb.mean() * dfb.mean(axis=0) + fb.mean() * dgb.mean(axis=0)
        g2 = (gb[:, None] * dfb + fb[:, None] * dgb).mean(axis=0)
        diff = g1 - g2
        sum1 += g1
        sumsq1 += g1 * g1
        sum2 += g2
        sumsq2 += g2 * g2
        sum_d += diff
        sumsq_d += diff * diff
    t = trials
    mean1, mean2 = sum1 / t, sum2 / t
    var1 = sumsq1 / t - mean1 ** 2
    var2 = sumsq2 / t - mean2 ** 2
    mean_d = sum_d / t
    var_d = np.maximum(sumsq_d / t - mean_d ** 2, 0.0)
    se_d = np.sqrt(var_d / t)
    return VarianceReport(mean1, mean2, se_d, np.maximum(var1, 0.0),
                          np.maximum(var2, 0.0), trials)


# ---------------------------------------------------------------------------
# Per-sample verdicts
# ---------------------------------------------------------------------------

@dataclass
class SampleVerdict:
    sample_id: int
    natural_correct: bool
    ibp_certified: bool
    pgd_margin: float
    exact_margin: float | None = None
    method_bounds: dict = field(default_factory=dict)


def verdict_json_line(v: SampleVerdict) -> str:
    payload = {
        "sample_id": v.sample_id,
        "natural_correct": v.natural_correct,
        "ibp_certified": v.ibp_certified,
        "pgd_margin": v.pgd_margin,
        "exact_margin": v.exact_margin,
        "method_bounds": {k: list(map(float, val)) for k, val in v.method_bounds.items()},
    }
    return json.dumps(payload, sort_keys=True)
