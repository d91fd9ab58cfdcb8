"""Training engines for BMLR, its baselines and its ablation variants.

Two update rules exist. ``joint_step`` minimises one summed loss over all
parameters. ``tpo_step`` (targeted parameter optimization) updates each
encoder only from its own unimodal loss and the decision layer only from
the fused loss. The methods differ in which rule they use and in how the
unimodal targets are built:

==================  ==========  ==========================================
method              update      unimodal targets
==================  ==========  ==========================================
baseline            joint       none (fused loss only)
uniform-baseline    joint       one-hot
only-reshape        joint       reshaped labels
uniform-reshaping   joint       one-hot smoothed evenly over other classes
bmlr                targeted    reshaped labels
only-tpo            targeted    one-hot
uni-distill         targeted    partner prediction, unit temperature
vanilla-reshape     targeted    partner target alone when gate is open
==================  ==========  ==========================================
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricsRow, accuracy, modality_ratio
from .model import JOINT, TARGETED, MultimodalClassifier
from .numeric import AdamState, NonFiniteError, adam_step, cross_entropy
from .reshaper import ReshapeConfig, cross_modal_targets, reshape_batch, uniform_reshape

METHODS = (
    "baseline",
    "uniform-baseline",
    "bmlr",
    "only-reshape",
    "only-tpo",
    "uni-distill",
    "vanilla-reshape",
    "uniform-reshaping",
)
TARGETED_METHODS = frozenset({"bmlr", "only-tpo", "uni-distill", "vanilla-reshape"})


class TrainingAborted(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    method: str = "bmlr"
    fusion: str = "concat"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0
    reshape: ReshapeConfig = field(default_factory=ReshapeConfig)
    unimodal_weights: tuple | None = None   # None -> 1.0 per modality
    smoothing: float = 0.1
    hidden: tuple = (64, 32)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")

    def weights(self, n_modalities):
        if self.unimodal_weights is None:
            return (1.0,) * n_modalities
        w = tuple(float(v) for v in self.unimodal_weights)
        if len(w) != n_modalities:
            raise ValueError(f"need {n_modalities} unimodal weights, got {len(w)}")
        return w


# -- losses -----------------------------------------------------------------

def unimodal_loss(targets, probs):
    """Batch-mean cross-entropy of unimodal predictions against (soft) targets."""
    return float(np.mean(cross_entropy(targets, probs)))


def multimodal_loss(y, probs):
    return float(np.mean(cross_entropy(y, probs)))


def _ce_grad(targets, probs):
    # d(mean CE)/d(logits) for softmax outputs and targets on the simplex
    return (probs - targets) / probs.shape[0]


# -- optimizer --------------------------------------------------------------

class GroupAdam:
    """One Adam state per parameter array, kept separately per group."""

    def __init__(self, model, lr):
        self.lr = lr
        self.states = {
            g: {k: AdamState.zeros_like(v, lr) for k, v in block.items()}
            for g, block in model.params.items()
        }

    def apply(self, model, grads, groups=None):
        new = {}
        for g, block in model.params.items():
            if groups is not None and g not in groups:
                new[g] = block
                continue
            new[g] = {}
            for k, p in block.items():
                try:
                    new[g][k], self.states[g][k] = adam_step(p, grads[g][k], self.states[g][k])
                except NonFiniteError as exc:
                    raise NonFiniteError(f"{g}.{k}: {exc}") from None
        model.set_params(new)


# -- steps ------------------------------------------------------------------

@dataclass
class StepResult:
    loss_fused: float
    loss_modality: list
    counts: np.ndarray
    size: int
    reshape: object = None


def _check_losses(res):
    vals = [res.loss_fused, *res.loss_modality]
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteError(f"non-finite loss: fused={res.loss_fused}, "
                             f"unimodal={res.loss_modality}")


def _forward_losses(trace, y, targets):
    M = trace.n_modalities
    loss_u = [unimodal_loss(y if targets is None else targets[u], trace.unimodal_probs[u])
              for u in range(M)]
    return multimodal_loss(y, trace.probs), loss_u


def tpo_step(model, opt, xs, y, targets, fused_weight=1.0, unimodal_weight=1.0,
             counts=None, reshape=None):
    """Targeted update: encoders from their unimodal losses, decision layer from the fused loss.

    ``targets`` is a list of (N, C) unimodal targets. The weights exist so
    tests can switch one objective off.
    """
    trace = model.forward(xs)
    loss0, loss_u = _forward_losses(trace, y, targets)
    res = StepResult(loss0, loss_u, np.zeros(model.n_modalities, int) if counts is None
                     else counts, y.shape[0], reshape)
    _check_losses(res)
    g_fused = fused_weight * _ce_grad(y, trace.probs)
    g_uni = [unimodal_weight * _ce_grad(targets[u], trace.unimodal_probs[u])
             for u in range(model.n_modalities)]
    grads = model.backward(trace, g_fused, g_uni, routing=TARGETED)
    opt.apply(model, grads)
    return res


def joint_step(model, opt, xs, y, targets, weights, counts=None, reshape=None):
    """Joint update of every parameter on L0 + sum_u w_u L_u.

    ``targets=None`` means the fused loss alone (plain baseline).
    """
    trace = model.forward(xs)
    loss0, loss_u = _forward_losses(trace, y, targets)
    res = StepResult(loss0, loss_u, np.zeros(model.n_modalities, int) if counts is None
                     else counts, y.shape[0], reshape)
    _check_losses(res)
    g_fused = _ce_grad(y, trace.probs)
    g_uni = None
    if targets is not None:
        g_uni = [weights[u] * _ce_grad(targets[u], trace.unimodal_probs[u])
                 for u in range(model.n_modalities)]
    grads = model.backward(trace, g_fused, g_uni, routing=JOINT)
    opt.apply(model, grads)
    return res


def build_targets(method, model, xs, y, cfg):
    """Unimodal targets for one minibatch, from the current (pre-update) model.

    Returns (targets or None, gate counts per modality, ReshapeBatch or None).
    """
    M = model.n_modalities
    zero = np.zeros(M, dtype=int)
    if method == "baseline":
        return None, zero, None
    if method in ("uniform-baseline", "only-tpo"):
        return [y] * M, zero, None
    if method == "uniform-reshaping":
        t = uniform_reshape(y, cfg.smoothing)
        return [t] * M, zero, None
    trace = model.forward(xs)
    if method == "uni-distill":
        d = cross_modal_targets(trace)
        return [d[:, u, :] for u in range(M)], zero, None
    rb = reshape_batch(trace, y, cfg.reshape, keep_label=(method != "vanilla-reshape"))
    return [rb.label(u) for u in range(M)], rb.counts(), rb


def variant_dispatch(cfg):
    """Return ``step(model, opt, xs, y) -> StepResult`` for ``cfg.method``."""
    if cfg.method not in METHODS:
        raise ValueError(f"unknown method {cfg.method!r}")
    method = cfg.method

    if method in TARGETED_METHODS:
        def step(model, opt, xs, y):
            targets, counts, rb = build_targets(method, model, xs, y, cfg)
            return tpo_step(model, opt, xs, y, targets, counts=counts, reshape=rb)
    else:
        def step(model, opt, xs, y):
            targets, counts, rb = build_targets(method, model, xs, y, cfg)
            return joint_step(model, opt, xs, y, targets, cfg.weights(model.n_modalities),
                              counts=counts, reshape=rb)
    step.method = method
    return step


# -- evaluation and training loop -------------------------------------------

@dataclass
class Evaluation:
    acc_fused: float
    acc_modality: list
    ratio: float | None
    loss_fused: float
    loss_modality: list
    probs: np.ndarray
    unimodal_probs: list


def evaluate(model, split):
    """Accuracies, modality-0/modality-1 ratio and one-hot losses on a split."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    y = split.one_hot
    trace = model.forward(split.xs)
    accs = [accuracy(p, split.labels) for p in trace.unimodal_probs]
    return Evaluation(
        acc_fused=accuracy(trace.probs, split.labels),
        acc_modality=accs,
        ratio=modality_ratio(accs[0], accs[1]),
        loss_fused=multimodal_loss(y, trace.probs),
        loss_modality=[unimodal_loss(y, p) for p in trace.unimodal_probs],
        probs=trace.probs,
        unimodal_probs=trace.unimodal_probs,
    )


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list = field(default_factory=list)
    model: MultimodalClassifier | None = None
    final: Evaluation | None = None
    wall_time: float = 0.0
    aborted: str | None = None

    @property
    def seed(self):
        return self.config.seed

    @property
    def last(self):
        return self.rows[-1] if self.rows else None


def train(cfg, dataset, on_reshape=None):
    """Run ``cfg.epochs`` epochs of shuffled minibatch training.

    ``on_reshape(epoch, train_indices, reshape_batch)`` is called for every
    minibatch that produced reshaping decisions.
    """
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train_set, test_set = dataset.train(), dataset.test()
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("dataset needs non-empty train and test splits")
    model = MultimodalClassifier(dataset.dims, dataset.n_classes, cfg.hidden, cfg.fusion, rng)
    opt = GroupAdam(model, cfg.lr)
    step = variant_dispatch(cfg)
    y_all = train_set.one_hot
    record = RunRecord(config=cfg, model=model)
    M = model.n_modalities
    n = len(train_set)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        tot0, tot_u, counts = 0.0, np.zeros(M), np.zeros(M, dtype=int)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs = [x[idx] for x in train_set.xs]
            try:
                res = step(model, opt, xs, y_all[idx])
            except NonFiniteError as exc:
                record.aborted = f"epoch {epoch}: {exc}"
                record.wall_time = time.perf_counter() - t0
                raise TrainingAborted(record.aborted, record) from exc
            tot0 += res.loss_fused * res.size
            tot_u += np.asarray(res.loss_modality) * res.size
            counts += res.counts
            if on_reshape is not None and res.reshape is not None:
                on_reshape(epoch, idx, res.reshape)
        ev = evaluate(model, test_set)
        record.rows.append(MetricsRow(
            epoch=epoch,
            acc_fused=ev.acc_fused,
            acc_modality=ev.acc_modality,
            ratio=ev.ratio,
            reshape_counts=[int(c) for c in counts],
            loss_fused=tot0 / n,
            loss_modality=[float(v) for v in tot_u / n],
            test_loss_fused=ev.loss_fused,
        ))
        record.final = ev
    record.wall_time = time.perf_counter() - t0
    return record
