"""PGD attacks over input balls and latent boxes, plus small-box selection.

All attacks are batched over axis 0 and deterministic given (config, rng).
The multi-estimator latent attack runs one maximization per wrong class,
batching all (sample, target) rows through the classifier together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interval import BoxBounds, box_from_ball
from .net import Network, forward_backward_input

__all__ = [
    "AttackConfig",
    "pgd_input",
    "pgd_latent",
    "sabr_select_region",
    "margin_targets",
]


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 8
    restarts: int = 1
    step_size: float | str = "auto"  # "auto" => 2 * radius / steps per coordinate
    objective: object = "cross_entropy"  # or ("logit_diff", target_index)
    seed: int = 0
    check_projection: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.step_size != "auto" and float(self.step_size) <= 0:
            raise ValueError("step_size must be positive")

    def resolve_step(self, lo, hi):
        if self.step_size == "auto":
            return (hi - lo) / self.steps
        return float(self.step_size)


def _ce_objective(labels):
    """Per-row cross-entropy ln(1 + sum_{i!=y} e^{o_i - o_y}) = lse(o) - o_y."""
    labels = np.asarray(labels, dtype=np.intp)

    def seed(logits):
        rows = np.arange(logits.shape[0])
        m = logits.max(axis=1)
        lse = np.log(np.exp(logits - m[:, None]).sum(axis=1)) + m
        vals = lse - logits[rows, labels]
        g = np.exp(logits - lse[:, None])
        g[rows, labels] -= 1.0
        return vals, g

    return seed


def _logit_diff_objective(targets, labels):
    targets = np.asarray(targets, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)

    def seed(logits):
        rows = np.arange(logits.shape[0])
        vals = logits[rows, targets] - logits[rows, labels]
        g = np.zeros_like(logits)
        g[rows, targets] += 1.0
        g[rows, labels] -= 1.0
        return vals, g

    return seed


def _objective_for(cfg: AttackConfig, labels, batch):
    if cfg.objective == "cross_entropy":
        return _ce_objective(labels)
    if isinstance(cfg.objective, tuple) and cfg.objective[0] == "logit_diff":
        target = cfg.objective[1]
        targets = np.full(batch, target, dtype=np.intp) if np.isscalar(target) else target
        return _logit_diff_objective(targets, labels)
    raise ValueError(f"unknown attack objective {cfg.objective!r}")


def _ascend(net, start, stop, lo, hi, labels, cfg, rng, seed_fn):
    """Shared PGD loop: returns the best-objective iterate per row."""
    eta = cfg.resolve_step(lo, hi)
    best_x = None
    best_val = None
    for _ in range(cfg.restarts):
        x = lo + rng.uniform(size=lo.shape) * (hi - lo)
        for step in range(cfg.steps + 1):
            vals, g = forward_backward_input(net, x, seed_fn, start=start, stop=stop)
            if best_val is None:
                best_val, best_x = vals.copy(), x.copy()
            else:
                better = vals > best_val
                if np.any(better):
                    best_val = np.where(better, vals, best_val)
                    best_x[better] = x[better]
            if step == cfg.steps:
                break
            x = np.clip(x + eta * np.sign(g), lo, hi)
            if cfg.check_projection:
                assert np.all(x >= lo) and np.all(x <= hi), "PGD iterate escaped its box"
    return best_x, best_val


def pgd_input(net: Network, x, y, eps, cfg: AttackConfig, rng=None, clip=(0.0, 1.0)):
    """Strongest found perturbation of ``x`` within the clipped eps-ball.

    Batched: ``x`` is (B, ...), ``y`` an int array (B,).  The returned points
    lie inside the ball; per sample the best-objective iterate over all
    restarts and steps is returned.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    box = box_from_ball(x, eps, clip)
    if eps == 0.0:
        return x.copy()
    seed_fn = _objective_for(cfg, y, x.shape[0])
    best, _ = _ascend(net, 0, len(net.layers), box.lo, box.hi, y, cfg, rng, seed_fn)
    return best


def margin_targets(num_classes, y):
    """All wrong classes per sample: (B, K-1) target matrix."""
    y = np.asarray(y, dtype=np.intp)
    k = num_classes
    grid = np.tile(np.arange(k), (y.size, 1))
    keep = grid != y[:, None]
    return grid[keep].reshape(y.size, k - 1)


def pgd_latent(net: Network, box: BoxBounds, y, cfg: AttackConfig, multi=True,
               targets=None, rng=None):
    """Latent attacks over the classifier within an embedding-space box.

    ``box`` holds batched bounds on the extractor output, (B, ...latent).
    Multi mode maximizes each logit difference (target minus label) with a
    separate point; it returns (points (B, T, ...latent), targets (B, T)).
    Single mode maximizes one cross-entropy objective and returns (B,
    ...latent).  Every returned point lies inside the box; degenerate
    coordinates (lo == hi) stay frozen at the bound.
    """
    if net.split_index >= len(net.layers):
        raise ValueError("network has an empty classifier; latent attack is undefined")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    y = np.asarray(y, dtype=np.intp)
    lo, hi = box.lo, box.hi
    start = net.split_index
    if not multi:
        seed_fn = _ce_objective(y)
        best, _ = _ascend(net, start, len(net.layers), lo, hi, y, cfg, rng, seed_fn)
        return best

    if targets is None:
        targets = margin_targets(net.num_classes, y)
    targets = np.asarray(targets, dtype=np.intp)
    b, t = targets.shape
    reps = lambda a: np.repeat(a, t, axis=0)
    lo_f, hi_f = reps(lo), reps(hi)
    y_f = np.repeat(y, t)
    tgt_f = targets.reshape(-1)
    seed_fn = _logit_diff_objective(tgt_f, y_f)
    best, _ = _ascend(net, start, len(net.layers), lo_f, hi_f, y_f, cfg, rng, seed_fn)
    return best.reshape((b, t) + lo.shape[1:]), targets


def sabr_select_region(net: Network, x, y, eps, tau, cfg: AttackConfig, rng=None,
                       clip=(0.0, 1.0)) -> BoxBounds:
    """Small adversarially-centered box inside the eps-ball.

    Attacks within the shrunk ball B(x, eps - tau) to pick a center, then
    returns B(center, tau) intersected with B(x, eps) and the value range,
    which guarantees the region is a subset of the full ball.
    """
    if not 0 < tau <= eps:
        raise ValueError(f"tau must lie in (0, eps]; got tau={tau}, eps={eps}")
    x = np.asarray(x, dtype=np.float64)
    shrink = eps - tau
    if shrink == 0.0:
        center = x.copy()
    else:
        center = pgd_input(net, x, y, shrink, cfg, rng=rng, clip=clip)
    lo = np.maximum(center - tau, x - eps)
    hi = np.minimum(center + tau, x + eps)
    if clip is not None:
        lo = np.maximum(lo, clip[0])
        hi = np.minimum(hi, clip[1])
    return BoxBounds(lo, hi)
