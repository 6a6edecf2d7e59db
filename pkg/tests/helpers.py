"""Shared builders for randomized model/state/corpus instances."""

import numpy as np

from mctm import Corpus, Document, ModelParams, Segment, Vocabulary
from mctm.params import DocState, VarState


def random_params(rng, k, w, sigma_scale=1.0):
    a = rng.normal(size=(k, k))
    sigma = sigma_scale * (a @ a.T / k + 0.5 * np.eye(k))
    mu = rng.normal(size=k)
    beta = rng.dirichlet(np.full(w, 0.8), size=k).T
    beta = np.maximum(beta, 1e-9)
    beta /= beta.sum(axis=0, keepdims=True)
    return ModelParams(mu, sigma, beta)


def random_corpus(rng, w, n_docs=1, n_segments=2, max_len=8):
    docs = []
    for d in range(n_docs):
        segs = []
        for _ in range(n_segments):
            n = int(rng.integers(2, max_len + 1))
            segs.append(Segment(rng.integers(0, w, size=n)))
        docs.append(Document(f"doc{d}", segs))
    vocab = Vocabulary([f"w{i}" for i in range(w)])
    return Corpus(docs, vocab)


def random_doc_state(rng, k, doc):
    s = doc.n_segments
    phi = []
    for seg in doc.segments:
        p = rng.dirichlet(np.ones(k), size=seg.word_ids.size)
        phi.append(np.maximum(p, 1e-12) / np.maximum(p, 1e-12).sum(1, keepdims=True))
    return DocState(
        lam=rng.normal(size=k),
        v2=rng.uniform(0.3, 2.0, size=k),
        xi=rng.normal(size=(s, k)),
        m2=rng.uniform(0.3, 2.0, size=(s, k)),
        zeta=rng.uniform(0.5, 5.0, size=s),
        phi=phi,
    )


def random_instance(rng, k, w, n_docs=1, n_segments=2, max_len=8):
    params = random_params(rng, k, w)
    corpus = random_corpus(rng, w, n_docs, n_segments, max_len)
    state = VarState(
        [random_doc_state(rng, k, d) for d in corpus.documents], k
    )
    return params, state, corpus


def fd_bound_gradient(fn, values, h=1e-5):
    """Central finite differences of a scalar function of a vector."""
    values = np.asarray(values, dtype=np.float64)
    grad = np.empty_like(values)
    for i in range(values.size):
        step = h * max(1.0, abs(values[i]))
        up = values.copy()
        up[i] += step
        dn = values.copy()
        dn[i] -= step
        grad[i] = (fn(up) - fn(dn)) / (2.0 * step)
    return grad
