"""Training loop: eps annealing, lr schedule, gradient clipping, early stopping.

The per-step loss follows the two-phase recipe: while eps is still ramping,
descend the sound bound loss plus the scaled stability regularizer; once eps
reaches its target, switch to the configured objective (plain bound loss for
ibp/sabr, the gradient-scaled product for taps/staps).  Validation tracks
natural accuracy and the attacked-latent accuracy, which drives best-model
selection once annealing has finished.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attack import AttackConfig, pgd_input, pgd_latent, sabr_select_region
from .checkpoint import save_checkpoint
from .data import Dataset, batches, train_val_split
from .interval import BoxBounds, box_from_ball, elided_bounds_on_tape, input_box_nodes, propagate_box_on_tape
from .loss import LossKind, ce_terms, combined_gradient, fast_regularizer_node, ibp_loss_terms, l1_penalty
from .net import Network, build_architecture, forward_batch, forward_on_tape, init_params, lift_params

__all__ = [
    "Schedule",
    "TrainConfig",
    "RunState",
    "NumericError",
    "epsilon_schedule",
    "lr_schedule",
    "train_step",
    "taps_accuracy",
    "natural_accuracy",
    "train_run",
    "CSV_COLUMNS",
]

CSV_COLUMNS = (
    "epoch", "step", "epsilon", "lr", "nat_loss", "ibp_loss", "taps_loss",
    "combined_loss", "grad_norm", "nat_acc", "taps_acc", "time_ms",
)


class NumericError(RuntimeError):
    """Raised when a training loss or gradient turns non-finite."""


@dataclass(frozen=True)
class Schedule:
    total_epochs: int = 70
    annealing_epochs: int = 20
    warmup_epochs: int = 1
    decay_epochs: tuple = (50, 60)
    decay_factor: float = 0.2
    lr0: float = 5e-4
    grad_clip: float = 10.0
    batch_size: int = 256
    eps_target: float = 0.1
    ramp: str = "smooth"  # cubic ease-in-out; "linear" optional

    def __post_init__(self):
        e1, e2 = self.decay_epochs
        if not (self.warmup_epochs <= self.annealing_epochs <= e1 < e2 <= self.total_epochs):
            raise ValueError(
                "need warmup <= annealing <= decay1 < decay2 <= total "
                f"(got {self.warmup_epochs}, {self.annealing_epochs}, {e1}, {e2}, "
                f"{self.total_epochs})"
            )
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.ramp not in ("smooth", "linear"):
            raise ValueError(f"unknown ramp {self.ramp!r}")


def epsilon_schedule(step, schedule: Schedule, steps_per_epoch) -> float:
    """Monotone ramp: zero through warmup, then up to eps_target."""
    if step < 0:
        raise ValueError("negative step")
    warm = schedule.warmup_epochs * steps_per_epoch
    ramp = (schedule.annealing_epochs - schedule.warmup_epochs) * steps_per_epoch
    if step <= warm:
        return 0.0
    if ramp <= 0 or step >= warm + ramp:
        return schedule.eps_target
    t = (step - warm) / ramp
    if schedule.ramp == "smooth":
        t = t * t * (3.0 - 2.0 * t)
    return schedule.eps_target * t


def lr_schedule(epoch, schedule: Schedule) -> float:
    lr = schedule.lr0
    for boundary in schedule.decay_epochs:
        if epoch >= boundary:
            lr *= schedule.decay_factor
    return lr


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = None

    def step(self, arrays, grads, lr):
        if self.velocity is None:
            self.velocity = [np.zeros_like(a) for a in arrays]
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.velocity[i] = self.momentum * self.velocity[i] + g
            out.append(a - lr * self.velocity[i])
        return out


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, arrays, grads, lr):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(a - lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps))
        return out


def make_optimizer(name, momentum=0.9):
    if name == "sgd":
        return SGD(momentum)
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Config and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = field(default_factory=LossKind)
    schedule: Schedule = field(default_factory=Schedule)
    arch: str = "mlp"
    hidden: tuple = (128, 128)
    classifier_relus: int = 1
    init: str = "ibp_stable"
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    l1: float = 0.0
    fast_reg_lambda: float = 0.5
    val_fraction: float = 0.1
    val_attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=8, seed=0))
    record_time: bool = True  # switch off for byte-identical metrics CSVs


@dataclass
class RunState:
    net: Network
    optimizer: object
    epoch: int = 0
    step: int = 0
    epsilon: float = 0.0
    lr: float = 0.0
    best_taps_acc: float = -1.0
    best_net: Network | None = None
    rng_attack: np.random.Generator | None = None
    taps_branch_steps: int = 0  # counts steps that invoked the latent pipeline


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------

def _mean_ce_concrete(net, X, y):
    logits = forward_batch(net, X)
    m = logits.max(axis=1)
    lse = np.log(np.exp(logits - m[:, None]).sum(axis=1)) + m
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def _bound_loss_grads(net, X, y, eps, *, region=None, reg_lambda=0.0, eps_frac=0.0,
                      clip=(0.0, 1.0)):
    """Gradient of mean bound loss (+ scaled regularizer during annealing)."""
    tape = T.Tape()
    params = lift_params(tape, net)
    box = region if region is not None else box_from_ball(np.asarray(X, dtype=np.float64), eps, clip)
    collected = []
    terms = ibp_loss_terms(tape, net, params, X, y, eps, clip, box=box, collect=collected)
    root = T.mean_all(terms)
    bound_value = float(root.value)
    if reg_lambda > 0.0 and eps_frac > 0.0:
        reg = fast_regularizer_node(tape, net, params, box, reg_lambda, collected=collected)
        root = T.add(root, T.scale(reg, eps_frac))
    param_ids = [e[n].id for e in params if e for n in ("weight", "bias")]
    grad_map = T.backward(tape, root, wanted=param_ids)
    grads = [grad_map[nid] for nid in param_ids]
    return grads, bound_value, float(root.value)


def _natural_grads(net, X, y):
    tape = T.Tape()
    params = lift_params(tape, net)
    logits = forward_on_tape(net, params, tape.constant(np.asarray(X, dtype=np.float64)))
    root = T.mean_all(ce_terms(logits, y))
    param_ids = [e[n].id for e in params if e for n in ("weight", "bias")]
    grad_map = T.backward(tape, root, wanted=param_ids)
    grads = [grad_map[nid] for nid in param_ids]
    return grads, float(root.value)


def global_grad_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, threshold):
    norm = global_grad_norm(grads)
    if threshold and norm > threshold:
        factor = threshold / norm
        grads = [g * factor for g in grads]
    return grads, norm


def train_step(batch, state: RunState, config: TrainConfig, steps_per_epoch,
               clip=(0.0, 1.0)):
    """Apply one update; returns the metrics row for this step."""
    X, y = batch
    sched = config.schedule
    eps = epsilon_schedule(state.step, sched, steps_per_epoch)
    lr = lr_schedule(state.epoch, sched)
    kind = config.loss
    annealing = eps < sched.eps_target
    rng = state.rng_attack

    taps_value = None
    bound_value = None
    if kind.tag == "natural":
        grads, objective = _natural_grads(state.net, X, y)
    elif kind.tag == "pgd_at":
        adv = X if eps == 0.0 else pgd_input(state.net, X, y, eps, kind.attack, rng=rng, clip=clip)
        grads, objective = _natural_grads(state.net, adv, y)
    else:
        region = None
        if kind.tag in ("sabr", "staps") and eps > 0.0:
            tau = kind.tau_ratio * eps
            region = sabr_select_region(state.net, X, y, eps, tau, kind.attack,
                                        rng=rng, clip=clip)
        degenerate = state.net.split_index >= len(state.net.layers)
        if annealing or not kind.uses_product or degenerate:
            eps_frac = eps / sched.eps_target if annealing else 0.0
            grads, bound_value, objective = _bound_loss_grads(
                state.net, X, y, eps, region=region,
                reg_lambda=config.fast_reg_lambda if annealing else 0.0,
                eps_frac=eps_frac, clip=clip)
        else:
            state.taps_branch_steps += 1
            grads, diag = combined_gradient(state.net, X, y, eps, kind, rng=rng, clip=clip)
            bound_value = diag["bound_loss"]
            taps_value = diag["attacked_loss"]
            objective = diag["product"]

    if config.l1 > 0.0:
        l1_val, l1_grads = l1_penalty(state.net.param_arrays(), config.l1)
        grads = [g + lg for g, lg in zip(grads, l1_grads)]
        objective += l1_val

    if not np.isfinite(objective):
        raise NumericError(
            f"non-finite loss at epoch {state.epoch} step {state.step}: {objective}"
        )
    grads, norm = clip_gradients(grads, sched.grad_clip)
    if not np.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at step {state.step}")

    state.net = state.net.with_params(state.optimizer.step(state.net.param_arrays(), grads, lr))
    state.epsilon = eps
    state.lr = lr
    state.step += 1
    return {
        "epsilon": eps,
        "lr": lr,
        "nat_loss": _mean_ce_concrete(state.net, X, y),
        "ibp_loss": bound_value,
        "taps_loss": taps_value,
        "combined_loss": objective,
        "grad_norm": norm,
    }


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def natural_accuracy(net: Network, X, y) -> float:
    logits = forward_batch(net, X)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _certified_mask(net: Network, X, y, eps, clip=(0.0, 1.0)):
    """Per-sample interval certification (all non-label diffs bounded < 0)."""
    tape = T.Tape()
    params = lift_params(tape, net)
    box = box_from_ball(np.asarray(X, dtype=np.float64), eps, clip)
    tb = input_box_nodes(tape, box, batched=True)
    bounds = elided_bounds_on_tape(net, params, tb, y)
    hi = bounds.hi.value.copy()
    hi[np.arange(len(y)), y] = -np.inf
    return hi.max(axis=1) < 0.0


def taps_accuracy(net: Network, X, y, eps, attack: AttackConfig | None = None,
                  rng=None, clip=(0.0, 1.0), chunk=256) -> float:
    """Fraction of samples whose latent attack points are all classified right.

    With an empty classifier this is interval-certified accuracy; with eps=0
    it reduces to natural accuracy.  Evaluation runs in chunks to bound the
    memory of the multi-target attack rows.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    attack = attack or AttackConfig(steps=8)
    if net.split_index >= len(net.layers):
        return float(np.mean(_certified_mask(net, X, y, eps, clip)))
    correct = 0
    for start in range(0, X.shape[0], chunk):
        xs = X[start : start + chunk]
        ys = y[start : start + chunk]
        tape = T.Tape()
        params = lift_params(tape, net)
        box = box_from_ball(xs, eps, clip)
        latent = propagate_box_on_tape(net, params, input_box_nodes(tape, box, batched=True),
                                       stop=net.split_index)
        latent_box = BoxBounds(latent.lo.value, latent.hi.value)
        points, targets = pgd_latent(net, latent_box, ys, attack, multi=True, rng=rng)
        b, t = targets.shape
        flat = points.reshape((b * t,) + points.shape[2:])
        logits = forward_batch(net, flat, start=net.split_index)
        diffs = logits - logits[np.arange(b * t), np.repeat(ys, t)][:, None]
        diffs[np.arange(b * t), np.repeat(ys, t)] = -np.inf
        worst = diffs.max(axis=1).reshape(b, t)
        correct += int(np.sum(np.all(worst < 0.0, axis=1)))
    return correct / X.shape[0]


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def train_run(config: TrainConfig, dataset: Dataset, out_dir):
    """Train per the schedule; writes metrics.csv, final.ckpt, best.ckpt.

    Returns a dict with artifact paths and the per-epoch history.  Best-model
    selection uses validation attacked-latent accuracy, evaluated once eps has
    reached its target.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_seed = seeds[0]
    shuffle_seed = int(seeds[1].generate_state(1)[0])
    attack_rng = np.random.default_rng(seeds[2])

    train_set, val_set = train_val_split(dataset, config.val_fraction, seed=config.seed)
    sample_shape = dataset.sample_shape
    net = build_architecture(config.arch, sample_shape, dataset.num_classes,
                             config.classifier_relus, hidden=config.hidden)
    net = init_params(net, init_seed, config.init)
    clip = (0.0, 1.0) if dataset.domain01 else None

    state = RunState(net=net, optimizer=make_optimizer(config.optimizer, config.momentum),
                     rng_attack=attack_rng)
    sched = config.schedule
    steps_per_epoch = max(1, int(np.ceil(len(train_set) / sched.batch_size)))

    csv_path = os.path.join(out_dir, "metrics.csv")
    history = []
    with open(csv_path, "w", encoding="utf-8", newline="") as csv:
        csv.write(",".join(CSV_COLUMNS) + "\n")
        for epoch in range(sched.total_epochs):
            state.epoch = epoch
            t0 = time.perf_counter()
            sums, counts = {}, {}
            for batch in batches(train_set, sched.batch_size, shuffle_seed, epoch):
                metrics = train_step(batch, state, config, steps_per_epoch, clip=clip)
                for k, v in metrics.items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v
                        counts[k] = counts.get(k, 0) + 1
            means = {k: v / counts[k] for k, v in sums.items()}
            nat_acc = natural_accuracy(state.net, val_set.images, val_set.labels)
            val_eps = state.epsilon
            t_acc = taps_accuracy(state.net, val_set.images, val_set.labels, val_eps,
                                  config.val_attack, rng=attack_rng, clip=clip)
            if state.epsilon >= sched.eps_target and t_acc >= state.best_taps_acc:
                state.best_taps_acc = t_acc
                state.best_net = state.net
            elapsed_ms = int(round((time.perf_counter() - t0) * 1000)) if config.record_time else 0
            row = {
                "epoch": epoch,
                "step": state.step,
                "epsilon": state.epsilon,
                "lr": state.lr,
                "nat_loss": means.get("nat_loss"),
                "ibp_loss": means.get("ibp_loss"),
                "taps_loss": means.get("taps_loss"),
                "combined_loss": means.get("combined_loss"),
                "grad_norm": means.get("grad_norm"),
                "nat_acc": nat_acc,
                "taps_acc": t_acc,
                "time_ms": elapsed_ms,
            }
            history.append(row)
            csv.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")

    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    meta = {"arch": config.arch, "seed": config.seed, "epoch": sched.total_epochs - 1}
    save_checkpoint(final_path, state.net, meta)
    save_checkpoint(best_path, state.best_net if state.best_net is not None else state.net,
                    dict(meta, selected="best_taps_acc"))
    return {
        "final": final_path,
        "best": best_path,
        "metrics": csv_path,
        "history": history,
        "state": state,
    }
