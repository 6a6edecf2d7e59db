"""M-step: maximize the bound B over the hyperparameters (beta, mu, Sigma)
given the variational state. All three updates are reductions over
per-document sums, accumulated in fixed document order."""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ValidationError

BETA_FLOOR = 1e-12
SIGMA_RIDGE = 1e-8
SIGMA_MIN_EIG = 1e-10


def mstep_beta(corpus, state):
    """Topic-word matrix update: responsibility-weighted word counts,
    normalized per topic column.

    Entries with zero accumulated weight are floored at 1e-12 before
    normalization so that log beta stays finite in the bound. A topic that
    received no mass at all is reset to uniform with a warning.
    """
    w = len(corpus.vocabulary)
    k = state.k
    acc = np.zeros((w, k))
    for dstate, doc in zip(state.doc_states, corpus.documents):
        for seg, phi_s in zip(doc.segments, dstate.phi):
            acc[seg.word_ids] += seg.counts[:, None] * phi_s
    empty = acc.sum(axis=0) == 0.0
    if np.any(empty):
        warnings.warn(
            f"{int(empty.sum())} topic(s) received no word mass; reset to uniform",
            stacklevel=2,
        )
    # A true floor, not just a zero-replacement: subnormal positive weights
    # would otherwise underflow to exactly 0 during normalization.
    acc = np.maximum(acc, BETA_FLOOR)
    return acc / acc.sum(axis=0, keepdims=True)


def mstep_mu(lambdas):
    """Prior mean update: average of the document means."""
    lambdas = np.atleast_2d(np.asarray(lambdas, dtype=np.float64))
    if lambdas.shape[0] < 1:
        raise ValidationError("need at least one document")
    return lambdas.mean(axis=0)


def mstep_sigma(state, mu):
    """Covariance update: normalized sum of the variational variances and
    the between-level mean deviations.

    Positive definite in exact arithmetic; a small ridge is added if
    floating point pushes the smallest eigenvalue below 1e-10.
    """
    k = mu.shape[0]
    acc = np.zeros((k, k))
    n_units = 0
    for dstate in state.doc_states:
        s = dstate.n_segments
        n_units += 1 + s
        # diag(v2) once per document plus diag(v2 + m2) per segment.
        diag = dstate.v2 * (1 + s) + dstate.m2.sum(axis=0)
        acc[np.diag_indices(k)] += diag
        dlam = dstate.lam - mu
        acc += np.outer(dlam, dlam)
        dxi = dstate.xi - dstate.lam
        acc += dxi.T @ dxi
    sigma = acc / n_units
    sigma = 0.5 * (sigma + sigma.T)
    if np.linalg.eigvalsh(sigma).min() < SIGMA_MIN_EIG:
        sigma = sigma + SIGMA_RIDGE * np.eye(k)
    return sigma
