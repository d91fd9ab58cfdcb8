"""Sample-level cross-modal label reshaping.

For each sample the true-class confidences of the modalities are compared.
The more confident modality (ratio ``lam`` above 1, but below ``1/beta``)
gets its one-hot target mixed with a tempered prediction of its partner:

    target = xi * d + (1 - xi) * y,   xi = 1 - 1/lam,
    d = softmax(partner_logits / (alpha * lam_partner))

With three or more modalities only the strongest/weakest pair takes part;
the rest keep their one-hot labels.
"""

from dataclasses import dataclass

import numpy as np

from .numeric import clamp_temperature, softmax, tempered_softmax

EPS_DIV = 1e-8
EPS_BETA = 1e-6


@dataclass(frozen=True)
class ReshapeConfig:
    alpha: float = 1.0
    beta: float = 0.2
    eps_beta: float = EPS_BETA
    eps_div: float = EPS_DIV

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        for name in ("eps_beta", "eps_div"):
            v = getattr(self, name)
            if not 0.0 < v <= 1e-4:
                raise ValueError(f"{name} must be in (0, 1e-4], got {v}")

    @property
    def effective_beta(self):
        return self.eps_beta if self.beta == 0 else self.beta


def _check_one_hot(y):
    y = np.asarray(y, dtype=np.float64)
    ok = np.all((y == 0) | (y == 1), axis=-1) & (y.sum(axis=-1) == 1)
    if not np.all(ok):
        raise ValueError("reshaping needs one-hot ground-truth labels")
    return y


def confidence_discrepancy(y, p_a, p_v, eps_div=EPS_DIV):
    """Ratio of true-class confidences, modality a over modality v.

    Both confidences are floored at ``eps_div`` so the ratio is always
    finite and positive. The partner ratio is the reciprocal.
    """
    y = _check_one_hot(y)
    num = np.maximum((y * np.asarray(p_a)).sum(axis=-1), eps_div)
    den = np.maximum((y * np.asarray(p_v)).sum(axis=-1), eps_div)
    return num / den


def distill_target(logits, alpha, lam_other):
    """Partner prediction softened at temperature alpha * lam_other."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if np.any(~(np.asarray(lam_other) > 0)):
        raise ValueError(f"confidence ratio must be > 0, got {lam_other!r}")
    return tempered_softmax(logits, alpha * np.asarray(lam_other, dtype=np.float64))


def reshaping_matrix(d):
    d = np.asarray(d, dtype=np.float64)
    return np.outer(d, np.ones_like(d))


def reshaping_intensity(lam, beta, eps_beta=EPS_BETA):
    """1 - 1/lam inside the open gate 1 < lam < 1/beta, else exactly 0."""
    lam = np.asarray(lam, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    beta = np.where(beta == 0, eps_beta, beta)
    with np.errstate(over="ignore"):
        upper = 1.0 / beta     # a subnormal beta gives inf, an always-open upper bound
    inside = (lam > 1.0) & (lam < upper)
    with np.errstate(divide="ignore"):
        xi = np.where(inside, 1.0 - 1.0 / np.where(inside, lam, 1.0), 0.0)
    return xi if xi.ndim else float(xi)


def reshape_label(y, d, xi):
    if not 0.0 <= xi < 1.0:
        raise ValueError(f"intensity must be in [0, 1), got {xi}")
    y = np.asarray(y, dtype=np.float64)
    return xi * np.asarray(d, dtype=np.float64) + (1.0 - xi) * y


def select_trimodal_pair(confidences):
    """(strongest, weakest) modality index; ties go to the lowest index."""
    c = np.asarray(confidences, dtype=np.float64)
    if c.shape[-1] < 3:
        raise ValueError("pair selection needs at least three modalities; "
                         "use the two-modality path")
    return int(np.argmax(c)), int(np.argmin(c))


@dataclass
class ReshapeDecision:
    """Per-sample outcome for one modality set."""

    lam: np.ndarray          # (M,)
    active: np.ndarray       # (M,) bool
    temperature: np.ndarray  # (M,), NaN where no partner is defined
    xi: np.ndarray           # (M,)
    targets: list            # per modality, None when inactive
    labels: np.ndarray       # (M, C) reshaped labels


@dataclass
class ReshapeBatch:
    """Batched reshaping results; arrays are indexed [sample, modality]."""

    lam: np.ndarray
    active: np.ndarray
    temperature: np.ndarray
    xi: np.ndarray
    targets: np.ndarray      # (N, M, C), NaN rows where inactive
    labels: np.ndarray       # (N, M, C)

    def __len__(self):
        return self.lam.shape[0]

    def label(self, u):
        return self.labels[:, u, :]

    def counts(self):
        return self.active.sum(axis=0).astype(int)

    def decisions(self):
        out = []
        for i in range(len(self)):
            out.append(ReshapeDecision(
                lam=self.lam[i].copy(),
                active=self.active[i].copy(),
                temperature=self.temperature[i].copy(),
                xi=self.xi[i].copy(),
                targets=[self.targets[i, u].copy() if self.active[i, u] else None
                         for u in range(self.lam.shape[1])],
                labels=self.labels[i].copy(),
            ))
        return out


def _partners(conf, eps_div):
    """Confidence ratios and partner indices, shape (N, M) each."""
    N, M = conf.shape
    lam = np.ones((N, M))
    partner = np.full((N, M), -1)
    rows = np.arange(N)
    if M == 2:
        lam_a = np.maximum(conf[:, 0], eps_div) / np.maximum(conf[:, 1], eps_div)
        lam[:, 0] = lam_a
        lam[:, 1] = 1.0 / lam_a
        partner[:, 0] = 1
        partner[:, 1] = 0
        return lam, partner
    strong = np.argmax(conf, axis=1)
    weak = np.argmin(conf, axis=1)
    paired = strong != weak
    ratio = np.maximum(conf[rows, strong], eps_div) / np.maximum(conf[rows, weak], eps_div)
    ratio = np.where(paired, ratio, 1.0)
    r = rows[paired]
    lam[r, strong[paired]] = ratio[paired]
    lam[r, weak[paired]] = 1.0 / ratio[paired]
    partner[r, strong[paired]] = weak[paired]
    partner[r, weak[paired]] = strong[paired]
    return lam, partner


def reshape_batch(unimodal_logits, y, cfg, keep_label=True):
    """Reshape the one-hot labels ``y`` (N, C) for every modality.

    ``unimodal_logits`` is a list of (N, C) arrays, or a forward trace.
    With ``keep_label=False`` an active modality's label is replaced by the
    partner target outright instead of mixed with the one-hot label.
    """
    logits = getattr(unimodal_logits, "unimodal_logits", unimodal_logits)
    logits = np.stack([np.atleast_2d(np.asarray(l, dtype=np.float64)) for l in logits], axis=1)
    y = _check_one_hot(np.atleast_2d(y))
    N, M, C = logits.shape
    if y.shape != (N, C):
        raise ValueError(f"labels shape {y.shape} does not match logits {(N, C)}")

    probs = softmax(logits)
    conf = (probs * y[:, None, :]).sum(axis=-1)
    lam, partner = _partners(conf, cfg.eps_div)
    xi = reshaping_intensity(lam, cfg.effective_beta, cfg.eps_beta)
    active = xi > 0

    has_partner = partner >= 0
    rows = np.arange(N)[:, None]
    safe_partner = np.where(has_partner, partner, 0)
    partner_lam = lam[rows, safe_partner]
    temperature = np.where(has_partner, clamp_temperature(cfg.alpha * partner_lam), np.nan)

    targets = np.full((N, M, C), np.nan)
    labels = np.repeat(y[:, None, :], M, axis=1)
    if active.any():
        n_idx, u_idx = np.nonzero(active)
        teacher = logits[n_idx, partner[n_idx, u_idx]]
        d = tempered_softmax(teacher, cfg.alpha * partner_lam[n_idx, u_idx])
        targets[n_idx, u_idx] = d
        if keep_label:
            x = xi[n_idx, u_idx][:, None]
            labels[n_idx, u_idx] = x * d + (1.0 - x) * y[n_idx]
        else:
            labels[n_idx, u_idx] = d
    return ReshapeBatch(lam=lam, active=active, temperature=temperature, xi=xi,
                        targets=targets, labels=labels)


def cross_modal_targets(unimodal_logits):
    """Ungated partner predictions at unit temperature, (N, M, C).

    With more than two modalities a modality's target is the mean of the
    other modalities' predictions.
    """
    logits = getattr(unimodal_logits, "unimodal_logits", unimodal_logits)
    probs = np.stack([softmax(np.atleast_2d(l)) for l in logits], axis=1)
    M = probs.shape[1]
    if M == 2:
        return probs[:, ::-1, :].copy()
    total = probs.sum(axis=1, keepdims=True)
    return (total - probs) / (M - 1)


def uniform_reshape(y, mass):
    """Move ``mass`` off the true class, spread evenly over the other classes."""
    if not 0.0 <= mass < 1.0:
        raise ValueError(f"smoothing mass must be in [0, 1), got {mass}")
    y = np.asarray(y, dtype=np.float64)
    C = y.shape[-1]
    return (1.0 - mass) * y + mass * (1.0 - y) / (C - 1)
