"""Variational EM driver, parameter initialization and the synthetic
corpus generator."""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document, Segment, Vocabulary
from .errors import ConvergenceWarning, NumericError, ValidationError
from .estep import EStepSchedule, estep_document
from .mstep import mstep_beta, mstep_mu, mstep_sigma
from .params import ModelParams, VarState, elbo_bound, softmax

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """EM driver configuration.

    ``rel_tol`` is the relative bound change below which EM stops; the
    default 1e-6 corresponds to a 0.0001% relative change.
    """

    k: int
    rel_tol: float = 1e-6
    max_em_iters: int = 500
    schedule: EStepSchedule = field(default_factory=EStepSchedule)
    seed: int = 0
    beta_init_scale: float = 1.0
    n_jobs: int = 1
    checkpoint_every: int = 0  # iterations; 0 disables
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.rel_tol <= 0:
            raise ValidationError("rel_tol must be positive")

    @classmethod
    def from_file(cls, path, **overrides):
        """Load from a JSON or TOML file mirroring the field names."""
        path = Path(path)
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib

            data = tomllib.loads(path.read_text(encoding="utf-8"))
        else:
            data = json.loads(path.read_text(encoding="utf-8"))
        schedule = EStepSchedule(**data.pop("schedule", {}))
        data.update(overrides)
        return cls(schedule=schedule, **data)


@dataclass
class FitReport:
    """Trace of one EM run."""

    bound_trajectory: list
    em_iters: int
    converged: bool
    estep_warnings: int

    def to_dict(self):
        return {
            "bound_trajectory": [float(b) for b in self.bound_trajectory],
            "em_iters": self.em_iters,
            "converged": self.converged,
            "estep_warnings": self.estep_warnings,
        }


def init_params(corpus, config):
    """Seeded initial hyperparameters: mu = 0, Sigma = I, beta columns drawn
    from a Dirichlet centered on a uniform/empirical-frequency mixture."""
    rng = np.random.default_rng(config.seed)
    w = len(corpus.vocabulary)
    k = config.k
    freq = corpus.term_frequencies().astype(np.float64)
    emp = freq / freq.sum()
    center = 0.95 / w + 0.05 * emp
    alpha = config.beta_init_scale * w * center
    beta = rng.dirichlet(alpha, size=k).T
    beta = np.maximum(beta, 1e-12)
    beta /= beta.sum(axis=0, keepdims=True)
    return ModelParams(np.zeros(k), np.eye(k), beta)


def _run_estep(params, corpus, state, schedule, n_jobs):
    docs = corpus.documents
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(
                pool.map(
                    lambda pair: estep_document(params, pair[0], pair[1], schedule),
                    zip(docs, state.doc_states),
                )
            )
    else:
        results = [
            estep_document(params, doc, ds, schedule)
            for doc, ds in zip(docs, state.doc_states)
        ]
    state.doc_states = [r[0] for r in results]
    return state


def fit(corpus, config):
    """Alternate E- and M-steps until the bound's relative change drops
    below ``config.rel_tol``.

    Returns (ModelParams, VarState, FitReport). Deterministic given the
    seed; the bound trajectory is checked to be non-decreasing.
    """
    if len(corpus.vocabulary) < config.k:
        logger.warning(
            "W=%d < K=%d: more topics than vocabulary terms",
            len(corpus.vocabulary),
            config.k,
        )
    params = init_params(corpus, config)
    state = VarState.initial(params, corpus)
    trajectory = []
    converged = False
    n_warnings = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        for it in range(config.max_em_iters):
            try:
                state = _run_estep(
                    params, corpus, state, config.schedule, config.n_jobs
                )
                beta = mstep_beta(corpus, state)
                mu = mstep_mu([ds.lam for ds in state.doc_states])
                sigma = mstep_sigma(state, mu)
                params = ModelParams(mu, sigma, beta)
                b = elbo_bound(params, state, corpus, validate=False)
            except NumericError as exc:
                raise NumericError(f"EM iteration {it}: {exc}") from exc
            trajectory.append(b)
            if len(trajectory) > 1:
                prev = trajectory[-2]
                if b < prev - BOUND_SLACK * max(1.0, abs(prev)):
                    raise NumericError(
                        f"bound decreased at EM iteration {it}: "
                        f"{prev:.12g} -> {b:.12g}; trajectory={trajectory}"
                    )
                if abs(b - prev) < config.rel_tol * abs(prev):
                    converged = True
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                _write_checkpoint(params, corpus, config)
            logger.debug("EM iteration %d: bound %.6f", it, b)
            if converged:
                break
        n_warnings = sum(
            1 for wi in caught if issubclass(wi.category, ConvergenceWarning)
        )
    report = FitReport(
        bound_trajectory=trajectory,
        em_iters=len(trajectory),
        converged=converged,
        estep_warnings=n_warnings,
    )
    return params, state, report


def _write_checkpoint(params, corpus, config):
    from .params import save_checkpoint

    if config.checkpoint_path:
        save_checkpoint(params, config.checkpoint_path, corpus.vocabulary.sha1())


def _zero_truncated_poisson(rng, rate, size):
    """Poisson conditioned on being >= 1 (resampling the zeros)."""
    out = rng.poisson(rate, size=size)
    zero = out == 0
    while np.any(zero):
        out[zero] = rng.poisson(rate, size=int(zero.sum()))
        zero = out == 0
    return out


@dataclass
class GroundTruth:
    """Latent variables recorded by the synthetic generator."""

    gamma: np.ndarray  # (D, K)
    eta: list  # per document, (S_d, K)
    z: list  # per document, list of per-segment topic index arrays


def generate(params, gen, n_documents, vocabulary=None):
    """Sample a corpus from the generative procedure.

    Segment counts and lengths are zero-truncated Poisson draws; document
    and segment Gaussians share the covariance; topics come through the
    softmax link and words from the chosen topic's beta column. Returns the
    corpus and the latent ground truth, reproducible from ``gen.seed``.
    """
    rng = np.random.default_rng(gen.seed)
    k, w = params.k, params.w
    chol = params.cholesky()
    beta_cdf = np.cumsum(params.beta, axis=0)  # (W, K)

    if vocabulary is None:
        width = max(4, len(str(w - 1)))
        vocabulary = Vocabulary([f"w{idx:0{width}d}" for idx in range(w)])
    elif len(vocabulary) != w:
        raise ValidationError("vocabulary size does not match beta")

    n_segments = _zero_truncated_poisson(rng, gen.upsilon_s, n_documents)
    gammas = np.empty((n_documents, k))
    etas, zs, documents = [], [], []
    width = max(4, len(str(n_documents - 1)))
    for d in range(n_documents):
        gamma = params.mu + chol @ rng.standard_normal(k)
        gammas[d] = gamma
        s_d = int(n_segments[d])
        eta_d = gamma + rng.standard_normal((s_d, k)) @ chol.T
        lengths = _zero_truncated_poisson(rng, gen.upsilon_n, s_d)
        segments, z_d = [], []
        for s in range(s_d):
            n = int(lengths[s])
            props = softmax(eta_d[s])
            z = rng.choice(k, size=n, p=props)
            u = rng.random(n)
            words = np.array(
                [np.searchsorted(beta_cdf[:, z[i]], u[i]) for i in range(n)],
                dtype=np.int64,
            )
            words = np.minimum(words, w - 1)
            segments.append(Segment(words))
            z_d.append(z)
        etas.append(eta_d)
        zs.append(z_d)
        documents.append(Document(f"doc{d:0{width}d}", segments))
    corpus = Corpus(documents, vocabulary)
    return corpus, GroundTruth(gamma=gammas, eta=etas, z=zs)
