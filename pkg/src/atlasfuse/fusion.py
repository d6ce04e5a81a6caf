"""Baseline label fusers: majority voting, STAPLE, and the weighted-voting
prior built from per-atlas similarity weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import LabelMap, Volume, _require_same_grid

# fitted rater parameters are confined to this box; degenerate raters
# (all-foreground or all-background decisions) would otherwise run to 0/1
PARAM_CLAMP = (0.01, 0.99)


def majority_vote(labels) -> LabelMap:
    """Foreground where foreground votes exceed half; ties are background."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one label map")
    _require_same_grid(labels)
    votes = np.zeros(labels[0].dims, dtype=np.int64)
    for lab in labels:
        votes += lab.data
    n = len(labels)
    return LabelMap(2 * votes > n, labels[0].spacing, labels[0].origin)


@dataclass(frozen=True)
class StapleParams:
    initial_sensitivity: float = 0.99
    initial_specificity: float = 0.99
    tolerance: float = 1e-6
    max_iterations: int = 100
    prevalence: float | None = None  # None: mean vote fraction

    def __post_init__(self):
        for p in (self.initial_sensitivity, self.initial_specificity):
            if not 0.0 < p < 1.0:
                raise ValueError("initial rater parameters must lie in (0, 1)")
        if self.prevalence is not None and not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")


@dataclass
class StapleResult:
    posterior: Volume
    labels: LabelMap
    sensitivity: np.ndarray
    specificity: np.ndarray
    log_likelihood: list = field(default_factory=list)
    iterations: int = 0


def staple_em(labels, params: StapleParams | None = None) -> StapleResult:
    """Simultaneous truth-and-performance EM for binary raters.

    E-step: per-voxel posterior of the hidden true label from the current
    sensitivities p_i, specificities q_i, and a fixed prevalence.  M-step:
    re-estimate (p_i, q_i), clamped to a safe box.  The observed-data
    log-likelihood is tracked and must never decrease.
    """
    if params is None:
        params = StapleParams()
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError("staple needs at least two raters")
    _require_same_grid(labels)
    decisions = np.stack([lab.data.astype(np.float64).ravel() for lab in labels])
    n_raters, n_vox = decisions.shape
    vote_fraction = decisions.mean()
    if vote_fraction == 0.0 or vote_fraction == 1.0:
        raise ValueError("staple needs both classes present among the votes")
    prevalence = params.prevalence if params.prevalence is not None else float(vote_fraction)

    lo, hi = PARAM_CLAMP
    p = np.full(n_raters, params.initial_sensitivity)
    q = np.full(n_raters, params.initial_specificity)
    ll_trace = []
    posterior = np.full(n_vox, prevalence)
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        # E-step in log space; decisions are 0/1 so the products reduce to sums
        log_a = np.log(prevalence) + decisions.T @ np.log(p) + (1.0 - decisions.T) @ np.log1p(-p)
        log_b = np.log1p(-prevalence) + (1.0 - decisions.T) @ np.log(q) + decisions.T @ np.log1p(-q)
        m = np.maximum(log_a, log_b)
        ll = float(np.sum(m + np.log(np.exp(log_a - m) + np.exp(log_b - m))))
        if ll_trace:
            floor = ll_trace[-1] - 1e-9 * max(1.0, abs(ll_trace[-1]))
            if ll < floor:
                raise RuntimeError("EM log-likelihood decreased; this is a bug")
        ll_trace.append(ll)
        posterior = 1.0 / (1.0 + np.exp(log_b - log_a))

        # M-step: weighted rater agreement rates, fixed-order sums
        w_sum = posterior.sum()
        c_sum = n_vox - w_sum
        new_p = np.clip((decisions @ posterior) / w_sum, lo, hi)
        new_q = np.clip(((1.0 - decisions) @ (1.0 - posterior)) / c_sum, lo, hi)
        change = max(np.abs(new_p - p).max(), np.abs(new_q - q).max())
        p, q = new_p, new_q
        if change < params.tolerance:
            break

    geometry = labels[0]
    post_vol = Volume(posterior.reshape(geometry.dims), geometry.spacing, geometry.origin)
    out = LabelMap(posterior.reshape(geometry.dims) > 0.5, geometry.spacing, geometry.origin)
    return StapleResult(posterior=post_vol, labels=out, sensitivity=p, specificity=q,
                        log_likelihood=ll_trace, iterations=iterations)


def label_prior(labels, weights, q: float = 4.0) -> Volume:
    """Per-voxel foreground probability from weighted atlas votes.

    Each atlas contributes weight^q to the class it voted for; the prior is
    the foreground share.  Both-zero support (possible when all weights are
    zero) yields 0.5.
    """
    labels = list(labels)
    weights = [float(w) for w in weights]
    if len(labels) != len(weights) or not labels:
        raise ValueError("need one weight per label map")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    _require_same_grid(labels)
    u1 = np.zeros(labels[0].dims, dtype=np.float64)
    u0 = np.zeros(labels[0].dims, dtype=np.float64)
    for lab, w in zip(labels, weights):
        wq = w ** q
        fg = lab.data.astype(bool)
        u1[fg] += wq
        u0[~fg] += wq
    total = u0 + u1
    prior = np.full(labels[0].dims, 0.5)
    np.divide(u1, total, out=prior, where=total > 0)
    return Volume(prior, labels[0].spacing, labels[0].origin)


def weighted_vote(labels, weights, q: float = 4.0) -> LabelMap:
    """Threshold the weighted-voting prior at one half (ties background)."""
    prior = label_prior(labels, weights, q=q)
    return LabelMap(prior.data > 0.5, prior.spacing, prior.origin)
