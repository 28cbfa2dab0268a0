"""Separation objectives and metrics.

SI-SDR is scale invariant (the estimate is compared against its projection
onto the reference); plain SDR is deliberately scale sensitive and can be
inflated or deflated by loudness alone. The permutation-invariant loss
resolves the estimate-to-reference assignment by exhaustive search.

All ratios are epsilon-regularized (EPS = 1e-8), so perfect estimates give
a large finite value rather than +inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgument

EPS = 1e-8


def _as_samples(x):
    return np.asarray(x.samples if hasattr(x, "samples") else x, dtype=np.float64)


def _check_pair(est, ref):
    est, ref = _as_samples(est), _as_samples(ref)
    if est.shape != ref.shape:
        raise InvalidArgument(f"length mismatch: {est.shape} vs {ref.shape}")
    if np.dot(ref, ref) == 0.0:
        raise InvalidArgument("zero reference signal")
    return est, ref


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB.

    s_t = (<est, ref> / (||ref||^2 + eps)) * ref;
    value = 10 log10((||s_t||^2 + eps) / (||est - s_t||^2 + eps)).
    """
    est, ref = _check_pair(est, ref)
    alpha = np.dot(est, ref) / (np.dot(ref, ref) + EPS)
    target = alpha * ref
    noise = est - target
    return float(10.0 * np.log10((np.dot(target, target) + EPS)
                                 / (np.dot(noise, noise) + EPS)))


def sdr(est, ref) -> float:
    """Plain (scale-sensitive) SDR in dB."""
    est, ref = _check_pair(est, ref)
    err = ref - est
    return float(10.0 * np.log10((np.dot(ref, ref) + EPS)
                                 / (np.dot(err, err) + EPS)))


@dataclass
class PermutationAssignment:
    """Bijection estimate index -> reference index, with per-pair SI-SDR."""
    mapping: tuple
    pair_scores: tuple


def upit(ests, refs):
    """Permutation-resolved loss: -(1/K) max_pi sum_k si_sdr(est_k, ref_pi(k)).

    Exhaustive over all K! assignments (K <= 6). Ties break toward the
    lexicographically smallest mapping. Returns (loss_dB, assignment).
    """
    ests = [_as_samples(e) for e in ests]
    refs = [_as_samples(r) for r in refs]
    k = len(ests)
    if len(refs) != k:
        raise InvalidArgument(f"source count mismatch: {k} vs {len(refs)}")
    if k > 6:
        raise InvalidArgument("exhaustive uPIT supports at most 6 sources")
    scores = np.array([[si_sdr(e, r) for r in refs] for e in ests])
    best_pi, best_total = None, -np.inf
    for pi in permutations(range(k)):
        total = sum(scores[i, pi[i]] for i in range(k))
        if total > best_total:  # permutations() is lexicographic: first win stays
            best_pi, best_total = pi, total
    assignment = PermutationAssignment(
        mapping=best_pi,
        pair_scores=tuple(scores[i, best_pi[i]] for i in range(k)))
    return -best_total / k, assignment


def improvement(est, ref, mix, metric=si_sdr) -> float:
    """metric(est, ref) - metric(mix, ref), in dB."""
    return metric(est, ref) - metric(mix, ref)


# ---------------------------------------------------------------------------
# Differentiable counterparts (autodiff tensors)
# ---------------------------------------------------------------------------

LOG10 = float(np.log(10.0))


def si_sdr_t(est: "ad.Tensor", ref: np.ndarray) -> "ad.Tensor":
    """SI-SDR with a differentiable estimate; `ref` is constant."""
    ref = np.asarray(ref, dtype=_valdtype(est))
    dot = ad.tsum(ad.mul(est, ref))
    alpha = ad.mul(dot, 1.0 / (float(np.dot(ref, ref)) + EPS))
    target = ad.mul(alpha, ref)
    noise = ad.sub(est, target)
    num = ad.add(ad.tsum(ad.mul(target, target)), EPS)
    den = ad.add(ad.tsum(ad.mul(noise, noise)), EPS)
    return ad.mul(ad.sub(ad.log(num), ad.log(den)), 10.0 / LOG10)


def _valdtype(t):
    return t.value.dtype if isinstance(t, ad.Tensor) else np.asarray(t).dtype


def upit_loss(ests, refs):
    """Differentiable uPIT loss.

    The winning permutation is found on plain values (upit); the returned
    scalar Tensor backpropagates through the chosen pairs only, which is
    the gradient of the max at its argmax. Also returns the assignment.
    """
    _, assignment = upit([e.value for e in ests], refs)
    k = len(ests)
    terms = [si_sdr_t(ests[i], _as_samples(refs[assignment.mapping[i]]))
             for i in range(k)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, -1.0 / k), assignment
