import numpy as np
import pytest

from mctm import Corpus, Document, ModelParams, Segment, VarState, Vocabulary
from mctm.mstep import mstep_beta, mstep_mu, mstep_sigma
from mctm.params import DocState, document_bound, elbo_bound

from helpers import fd_bound_gradient, random_instance


def single_topic_state(corpus):
    docs = []
    for doc in corpus.documents:
        s = doc.n_segments
        docs.append(
            DocState(
                lam=np.zeros(1),
                v2=np.ones(1),
                xi=np.zeros((s, 1)),
                m2=np.ones((s, 1)),
                zeta=np.full(s, np.exp(0.5)),
                phi=[np.ones((seg.word_ids.size, 1)) for seg in doc.segments],
            )
        )
    return VarState(docs, 1)


class TestBeta:
    def test_single_topic_empirical_frequencies(self):
        vocab = Vocabulary(["a", "b"])
        corpus = Corpus([Document("d", [Segment([0, 0, 1])])], vocab)
        beta = mstep_beta(corpus, single_topic_state(corpus))
        assert np.allclose(beta[:, 0], [2 / 3, 1 / 3])

    def test_one_hot_phi(self):
        vocab = Vocabulary(["a", "b", "c"])
        corpus = Corpus([Document("d", [Segment([0, 1, 1, 2])])], vocab)
        phi = np.zeros((3, 2))
        phi[:, 0] = 1.0  # every word assigned to topic 0
        state = VarState(
            [
                DocState(
                    lam=np.zeros(2),
                    v2=np.ones(2),
                    xi=np.zeros((1, 2)),
                    m2=np.ones((1, 2)),
                    zeta=np.array([1.0]),
                    phi=[phi],
                )
            ],
            2,
        )
        with pytest.warns(UserWarning, match="no word mass"):
            beta = mstep_beta(corpus, state)
        assert np.allclose(beta[:, 0], [0.25, 0.5, 0.25])
        assert np.allclose(beta[:, 1], 1 / 3)  # uniform after flooring

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_position_level_recount(self, seed):
        rng = np.random.default_rng(seed)
        k = 3
        params, state, corpus = random_instance(
            rng, k, w=8, n_docs=2, n_segments=2
        )
        beta = mstep_beta(corpus, state)
        # Brute force: accumulate position by position.
        acc = np.zeros((8, k))
        for ds, doc in zip(state.doc_states, corpus.documents):
            for seg, phi_s in zip(doc.segments, ds.phi):
                row = {int(w): r for r, w in enumerate(seg.word_ids)}
                for pos in seg.positions:
                    acc[int(pos)] += phi_s[row[int(pos)]]
        expected = acc / acc.sum(axis=0, keepdims=True)
        assert np.allclose(beta, expected, atol=1e-12)

    def test_columns_stochastic(self):
        rng = np.random.default_rng(17)
        _, state, corpus = random_instance(rng, 4, 10, n_docs=3)
        beta = mstep_beta(corpus, state)
        assert np.all(beta >= 0)
        assert np.allclose(beta.sum(axis=0), 1.0, atol=1e-12)


class TestMu:
    def test_single_document(self):
        lam = np.array([0.3, -1.2])
        assert np.allclose(mstep_mu([lam]), lam)

    def test_two_documents(self):
        assert np.allclose(
            mstep_mu([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5]
        )

    def test_stationary_by_finite_differences(self):
        rng = np.random.default_rng(23)
        params, state, corpus = random_instance(rng, 3, 8, n_docs=3)
        mu = mstep_mu([ds.lam for ds in state.doc_states])
        params2 = ModelParams(mu, params.sigma, params.beta)

        def bound_at(m):
            p = ModelParams(m, params.sigma, params.beta)
            return elbo_bound(p, state, corpus)

        grad = fd_bound_gradient(bound_at, mu, h=1e-6)
        assert np.abs(grad).max() < 1e-6
        assert np.isfinite(elbo_bound(params2, state, corpus))


class TestSigma:
    def test_degenerate_single_unit(self):
        # lam = xi = mu and unit variances: outer products vanish and the
        # update reduces to (diag(1) + diag(2)) / 2 = 1.5 I.
        state = VarState(
            [
                DocState(
                    lam=np.zeros(2),
                    v2=np.ones(2),
                    xi=np.zeros((1, 2)),
                    m2=np.ones((1, 2)),
                    zeta=np.array([1.0]),
                    phi=[np.full((1, 2), 0.5)],
                )
            ],
            2,
        )
        sigma = mstep_sigma(state, np.zeros(2))
        assert np.allclose(sigma, 1.5 * np.eye(2))

    def test_symmetric_exactly(self):
        rng = np.random.default_rng(29)
        _, state, _ = random_instance(rng, 4, 10, n_docs=3)
        sigma = mstep_sigma(state, mstep_mu([d.lam for d in state.doc_states]))
        assert np.array_equal(sigma, sigma.T)
        assert np.linalg.eigvalsh(sigma).min() > 0

    def test_optimal_against_symmetric_perturbations(self):
        rng = np.random.default_rng(37)
        params, state, corpus = random_instance(rng, 3, 8, n_docs=2)
        mu = mstep_mu([ds.lam for ds in state.doc_states])
        sigma = mstep_sigma(state, mu)
        beta = mstep_beta(corpus, state)
        best = elbo_bound(ModelParams(mu, sigma, beta), state, corpus)
        for _ in range(10):
            e = rng.normal(size=(3, 3))
            e = 0.5 * (e + e.T)
            e *= 1e-4 / np.linalg.norm(e)
            for sign in (1.0, -1.0):
                p = ModelParams(mu, sigma + sign * e, beta)
                assert elbo_bound(p, state, corpus) <= best + 1e-10


class TestBetaOptimality:
    def test_beta_update_maximizes_bound_per_column(self):
        rng = np.random.default_rng(43)
        params, state, corpus = random_instance(rng, 3, 6, n_docs=2)
        mu = mstep_mu([ds.lam for ds in state.doc_states])
        sigma = mstep_sigma(state, mu)
        beta = mstep_beta(corpus, state)
        best = elbo_bound(ModelParams(mu, sigma, beta), state, corpus)
        for col in range(3):
            for w in range(6):
                for eps in (1e-3, -1e-3):
                    cand = beta.copy()
                    cand[w, col] += eps
                    if np.any(cand[:, col] <= 0):
                        continue
                    cand[:, col] /= cand[:, col].sum()
                    p = ModelParams(mu, sigma, cand)
                    assert elbo_bound(p, state, corpus) <= best + 1e-10
