"""Model hyperparameters, variational state, the softmax link and the
objective lower bound.

The model places a Gaussian ``gamma_d ~ N(mu, Sigma)`` on each document, a
Gaussian ``eta_ds ~ N(gamma_d, Sigma)`` on each segment, maps ``eta`` to
topic proportions through the softmax link, and draws words from per-topic
distributions (columns of ``beta``). Inference maximizes a tractable lower
bound ``B`` of the log evidence obtained by linearizing the softmax
normalizer with one auxiliary parameter ``zeta`` per segment.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import xlogy

from .errors import NumericError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)

_CHECKPOINT_MAGIC = b"MCTM"
_CHECKPOINT_VERSION = 1


def softmax(eta):
    """Softmax link mapping a real vector to topic proportions.

    Shift-invariant and computed with max subtraction, so any finite input
    is safe. Works on the last axis of a batched array.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if not np.all(np.isfinite(eta)):
        raise NumericError("softmax input must be finite")
    shifted = eta - eta.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


class ModelParams:
    """Hyperparameters (mu, Sigma, beta) with cached Sigma factorizations.

    Invariants: Sigma symmetric positive definite; every column of beta is a
    probability vector. Instances are treated as immutable.
    """

    def __init__(self, mu, sigma, beta):
        mu = np.array(mu, dtype=np.float64)
        sigma = np.array(sigma, dtype=np.float64)
        beta = np.array(beta, dtype=np.float64)
        if mu.ndim != 1:
            raise ValidationError("mu must be a vector")
        k = mu.shape[0]
        if sigma.shape != (k, k):
            raise ValidationError(f"sigma must be {k}x{k}, got {sigma.shape}")
        if beta.ndim != 2 or beta.shape[1] != k:
            raise ValidationError(f"beta must be WxK with K={k}, got {beta.shape}")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise NumericError("non-finite entries in mu or sigma")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-8):
            raise ValidationError("sigma must be symmetric")
        if np.any(beta < 0):
            raise ValidationError("beta must be non-negative")
        colsums = beta.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > 1e-10):
            raise ValidationError("each beta column must sum to 1 within 1e-10")
        try:
            self._chol = cho_factor(sigma, lower=True)
        except LinAlgError as exc:
            raise NumericError("sigma is not positive definite") from exc

        self.mu = mu
        self.sigma = sigma
        self.beta = beta
        self.k = k
        self.w = beta.shape[0]
        # K <= 256 assumed, so the explicit inverse (from the Cholesky
        # factor) is cheap and lets updates read (Sigma^-1)_{kk} directly.
        self.sigma_inv = cho_solve(self._chol, np.eye(k))
        self.sigma_inv = 0.5 * (self.sigma_inv + self.sigma_inv.T)
        self.sigma_inv_diag = np.diag(self.sigma_inv).copy()
        self.sigma_logdet = 2.0 * np.log(np.diag(self._chol[0])).sum()
        for arr in (self.mu, self.sigma, self.beta, self.sigma_inv,
                    self.sigma_inv_diag):
            arr.setflags(write=False)

    def cholesky(self):
        """Lower-triangular factor L with Sigma = L L^T."""
        return np.tril(self._chol[0])

    def permute_topics(self, perm):
        """Relabel topics; used by permutation-equivariance checks."""
        perm = np.asarray(perm)
        return ModelParams(
            self.mu[perm], self.sigma[np.ix_(perm, perm)], self.beta[:, perm]
        )


@dataclass(frozen=True)
class GenerativeConfig:
    """Rates of the zero-truncated Poisson draws in the synthetic generator."""

    upsilon_s: float = 4.0
    upsilon_n: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.upsilon_s <= 0 or self.upsilon_n <= 0:
            raise ValidationError("Poisson rates must be positive")


class DocState:
    """Variational parameters for one document.

    ``lam``/``v2`` parametrize the document Gaussian, ``xi``/``m2``/``zeta``
    the per-segment Gaussians and their softmax-normalizer linearization,
    and ``phi[s]`` holds one topic simplex per *unique* word of segment s
    (the word-topic update depends on the word type only).
    """

    __slots__ = ("lam", "v2", "xi", "m2", "zeta", "phi")

    def __init__(self, lam, v2, xi, m2, zeta, phi):
        self.lam = np.asarray(lam, dtype=np.float64)
        self.v2 = np.asarray(v2, dtype=np.float64)
        self.xi = np.asarray(xi, dtype=np.float64)
        self.m2 = np.asarray(m2, dtype=np.float64)
        self.zeta = np.asarray(zeta, dtype=np.float64)
        self.phi = [np.asarray(p, dtype=np.float64) for p in phi]

    @property
    def n_segments(self):
        return self.xi.shape[0]

    def copy(self):
        return DocState(
            self.lam.copy(),
            self.v2.copy(),
            self.xi.copy(),
            self.m2.copy(),
            self.zeta.copy(),
            [p.copy() for p in self.phi],
        )

    def validate(self, k, doc):
        s = doc.n_segments
        if self.lam.shape != (k,) or self.v2.shape != (k,):
            raise ValidationError("lambda/v2 shape mismatch")
        if self.xi.shape != (s, k) or self.m2.shape != (s, k):
            raise ValidationError("xi/m2 shape mismatch")
        if self.zeta.shape != (s,) or len(self.phi) != s:
            raise ValidationError("zeta/phi shape mismatch")
        for seg, p in zip(doc.segments, self.phi):
            if p.shape != (seg.word_ids.size, k):
                raise ValidationError("phi shape mismatch")
        if np.any(self.v2 <= 0) or np.any(self.m2 <= 0) or np.any(self.zeta <= 0):
            raise ValidationError("v2, m2 and zeta must be strictly positive")


def initial_doc_state(params, doc):
    """Fresh variational state: segment means at mu, unit variances."""
    k = params.k
    s = doc.n_segments
    xi = np.tile(params.mu, (s, 1))
    m2 = np.ones((s, k))
    a = xi + 0.5 * m2
    shift = a.max(axis=1, keepdims=True)
    zeta = np.exp(shift[:, 0]) * np.exp(a - shift).sum(axis=1)
    phi = [np.full((seg.word_ids.size, k), 1.0 / k) for seg in doc.segments]
    return DocState(params.mu.copy(), np.ones(k), xi, m2, zeta, phi)


class VarState:
    """Per-document variational states for a whole corpus."""

    def __init__(self, doc_states, k):
        self.doc_states = list(doc_states)
        self.k = k

    @classmethod
    def initial(cls, params, corpus):
        return cls(
            [initial_doc_state(params, d) for d in corpus.documents], params.k
        )

    def validate(self, params, corpus):
        if len(self.doc_states) != corpus.n_documents:
            raise ValidationError("state/corpus document count mismatch")
        for ds, doc in zip(self.doc_states, corpus.documents):
            ds.validate(params.k, doc)


def document_bound(params, dstate, doc, validate=True):
    """Contribution of one document to the objective lower bound B.

    Follows the printed bound term by term, with two corrections forced by
    the stationarity conditions of the closed-form updates:
    - the document-level trace term Tr(diag(v2) Sigma^-1) is summed over
      documents (here: counted once per document);
    - the segment-Gaussian entropy is per (segment, topic), not per word
      (otherwise the printed d B / d m2 gradient, which has no N factor on
      the 1/(2 m2) term, would not match).
    The printed bound also subtracts sum_k phi_k (a constant -1 per word
    position, since phi lies on the simplex); it is kept as printed, which
    only shifts B by -N relative to the tightest form and preserves
    B <= log evidence.
    """
    if validate:
        dstate.validate(params.k, doc)
    k = params.k
    inv = params.sigma_inv
    diag_inv = params.sigma_inv_diag
    gauss_const = -0.5 * params.sigma_logdet - 0.5 * k * LOG_2PI

    lam, v2 = dstate.lam, dstate.v2
    dlam = lam - params.mu
    b = gauss_const - 0.5 * float(v2 @ diag_inv) - 0.5 * float(dlam @ inv @ dlam)

    log_zeta = np.log(dstate.zeta)
    for s, seg in enumerate(doc.segments):
        xi_s = dstate.xi[s]
        m2_s = dstate.m2[s]
        phi_s = dstate.phi[s]
        n = seg.n_words
        dxi = xi_s - lam
        b += (
            gauss_const
            - 0.5 * float((v2 + m2_s) @ diag_inv)
            - 0.5 * float(dxi @ inv @ dxi)
        )
        # Softmax-normalizer linearization: exp(xi + m2/2 - log zeta) keeps
        # the ratio finite even when the exponent alone would overflow.
        zterm = np.exp(xi_s + 0.5 * m2_s - log_zeta[s]).sum()
        sum_phi = seg.counts @ phi_s
        b += float(xi_s @ sum_phi) + n * (-zterm + 1.0 - log_zeta[s])
        rows = params.beta[seg.word_ids]
        b += float((seg.counts[:, None] * xlogy(phi_s, rows)).sum())
        b += 0.5 * float((np.log(m2_s) + LOG_2PI + 1.0).sum())
        b += -float(n)
        b += -float((seg.counts[:, None] * xlogy(phi_s, phi_s)).sum())

    b += 0.5 * float((np.log(v2) + LOG_2PI + 1.0).sum())
    return b


def elbo_bound(params, state, corpus, validate=True):
    """The objective lower bound B over the whole corpus."""
    if validate:
        state.validate(params, corpus)
    # Fixed document order keeps the reduction reproducible.
    return sum(
        document_bound(params, ds, doc, validate=False)
        for ds, doc in zip(state.doc_states, corpus.documents)
    )


def save_checkpoint(params, path, vocab_sha1=None, extra=None):
    """Write a model checkpoint.

    Layout: 4-byte magic ``MCTM``, little-endian uint32 header length, a
    UTF-8 JSON header with dimensions and the format version, then mu
    (K), sigma (KxK) and beta (WxK) as row-major little-endian float64.
    """
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "k": params.k,
        "w": params.w,
    }
    if vocab_sha1 is not None:
        header["vocab_sha1"] = vocab_sha1
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (params.mu, params.sigma, params.beta):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns (ModelParams, header dict).
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != _CHECKPOINT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint version {header.get('format_version')}"
            )
        k, w = header["k"], header["w"]
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = k + k * k + w * k
    if data.size != expected:
        raise ValidationError(
            f"checkpoint payload has {data.size} floats, expected {expected}"
        )
    mu = data[:k]
    sigma = data[k : k + k * k].reshape(k, k)
    beta = data[k + k * k :].reshape(w, k)
    return ModelParams(mu, sigma, beta), header
