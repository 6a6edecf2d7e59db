import json
import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from mctm import (
    Corpus,
    Document,
    GenerativeConfig,
    ModelParams,
    Segment,
    TrainConfig,
    ValidationError,
    Vocabulary,
    fit,
    generate,
    init_params,
    softmax,
)


def block_beta(k, w):
    """Well-separated topics: each concentrated on its own word block."""
    beta = np.full((w, k), 0.01 / w)
    block = w // k
    for topic in range(k):
        lo, hi = topic * block, (topic + 1) * block if topic < k - 1 else w
        beta[lo:hi, topic] += 0.99 / (hi - lo)
    return beta / beta.sum(axis=0, keepdims=True)


@pytest.fixture(scope="module")
def small_synthetic():
    params = ModelParams(np.zeros(3), 0.5 * np.eye(3), block_beta(3, 24))
    gen = GenerativeConfig(upsilon_s=3, upsilon_n=25, seed=7)
    corpus, _ = generate(params, gen, 20)
    return params, corpus


class TestGenerate:
    def test_truncation(self, small_synthetic):
        _, corpus = small_synthetic
        for doc in corpus.documents:
            assert doc.n_segments >= 1
            for seg in doc.segments:
                assert seg.n_words >= 1

    def test_reproducible_from_seed(self):
        params = ModelParams(np.zeros(2), np.eye(2), np.full((4, 2), 0.25))
        gen = GenerativeConfig(upsilon_s=2, upsilon_n=10, seed=5)
        c1, t1 = generate(params, gen, 6)
        c2, t2 = generate(params, gen, 6)
        assert c1 == c2
        assert np.array_equal(t1.gamma, t2.gamma)

    def test_truncated_poisson_mean(self):
        params = ModelParams(np.zeros(2), np.eye(2), np.full((4, 2), 0.25))
        gen = GenerativeConfig(upsilon_s=5.0, upsilon_n=3.0, seed=11)
        corpus, _ = generate(params, gen, 10_000)
        counts = np.array([d.n_segments for d in corpus.documents])
        rate = 5.0
        mean = rate / (1.0 - math.exp(-rate))
        var = mean * (1.0 + rate - mean)
        se = math.sqrt(var / counts.size)
        assert abs(counts.mean() - mean) < 3 * se

    def test_degenerate_covariance_matches_prior_mean(self):
        # With Sigma ~ 0 every segment's proportions collapse to softmax(mu),
        # so the empirical topic frequency matches it up to sampling error.
        mu = np.array([0.5, -0.5, 0.0])
        params = ModelParams(mu, 1e-12 * np.eye(3), np.full((5, 3), 0.2))
        gen = GenerativeConfig(upsilon_s=3, upsilon_n=50, seed=13)
        _, truth = generate(params, gen, 200)
        z_all = np.concatenate([np.concatenate(zd) for zd in truth.z])
        freqs = np.bincount(z_all, minlength=3) / z_all.size
        assert np.abs(freqs - softmax(mu)).max() < 0.02

    def test_identity_beta_words_equal_topics(self):
        params = ModelParams(np.zeros(3), 0.5 * np.eye(3), np.eye(3))
        gen = GenerativeConfig(upsilon_s=2, upsilon_n=40, seed=17)
        corpus, truth = generate(params, gen, 30)
        for doc, z_d, eta_d in zip(corpus.documents, truth.z, truth.eta):
            for seg, z_s in zip(doc.segments, z_d):
                assert np.array_equal(seg.positions, z_s)


class TestInitParams:
    def test_invariants(self, small_synthetic):
        _, corpus = small_synthetic
        params = init_params(corpus, TrainConfig(k=4, seed=3))
        assert np.allclose(params.beta.sum(axis=0), 1.0, atol=1e-10)
        assert np.all(params.beta >= 0)
        assert np.array_equal(params.mu, np.zeros(4))
        assert np.array_equal(params.sigma, np.eye(4))

    def test_seed_determinism(self, small_synthetic):
        _, corpus = small_synthetic
        a = init_params(corpus, TrainConfig(k=3, seed=9))
        b = init_params(corpus, TrainConfig(k=3, seed=9))
        assert np.array_equal(a.beta, b.beta)
        c = init_params(corpus, TrainConfig(k=3, seed=10))
        assert not np.array_equal(a.beta, c.beta)

    def test_large_scale_concentrates_on_center(self, small_synthetic):
        _, corpus = small_synthetic
        w = len(corpus.vocabulary)
        freq = corpus.term_frequencies().astype(float)
        center = 0.95 / w + 0.05 * freq / freq.sum()
        params = init_params(
            corpus, TrainConfig(k=2, seed=1, beta_init_scale=1e8)
        )
        assert np.abs(params.beta - center[:, None]).max() < 1e-3


class TestTrainConfig:
    def test_invalid_k(self):
        with pytest.raises(ValidationError):
            TrainConfig(k=0)

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(
            json.dumps(
                {
                    "k": 4,
                    "rel_tol": 1e-5,
                    "seed": 2,
                    "schedule": {"max_sweeps": 7},
                }
            )
        )
        cfg = TrainConfig.from_file(path)
        assert cfg.k == 4 and cfg.rel_tol == 1e-5
        assert cfg.schedule.max_sweeps == 7

    def test_from_toml_file(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("k = 3\nmax_em_iters = 12\n")
        cfg = TrainConfig.from_file(path)
        assert cfg.k == 3 and cfg.max_em_iters == 12


class TestFit:
    def test_bound_trajectory_non_decreasing(self, small_synthetic):
        _, corpus = small_synthetic
        _, _, report = fit(corpus, TrainConfig(k=3, seed=1, max_em_iters=25))
        traj = report.bound_trajectory
        for prev, cur in zip(traj, traj[1:]):
            assert cur >= prev - 1e-8 * abs(prev)

    def test_single_topic_recovers_empirical_frequencies(self, small_synthetic):
        _, corpus = small_synthetic
        params, _, report = fit(corpus, TrainConfig(k=1, max_em_iters=100))
        freq = corpus.term_frequencies().astype(float)
        assert np.allclose(params.beta[:, 0], freq / freq.sum(), atol=1e-9)
        assert report.converged

    def test_deterministic_given_seed(self, small_synthetic):
        _, corpus = small_synthetic
        cfg = TrainConfig(k=2, seed=4, max_em_iters=5)
        p1, s1, r1 = fit(corpus, cfg)
        p2, s2, r2 = fit(corpus, cfg)
        assert np.array_equal(p1.beta, p2.beta)
        assert np.array_equal(p1.sigma, p2.sigma)
        assert r1.bound_trajectory == r2.bound_trajectory
        assert np.array_equal(s1.doc_states[0].lam, s2.doc_states[0].lam)

    def test_threaded_estep_matches_serial(self, small_synthetic):
        _, corpus = small_synthetic
        p1, _, r1 = fit(corpus, TrainConfig(k=2, seed=4, max_em_iters=4))
        p2, _, r2 = fit(
            corpus, TrainConfig(k=2, seed=4, max_em_iters=4, n_jobs=4)
        )
        assert np.array_equal(p1.beta, p2.beta)
        assert r1.bound_trajectory == r2.bound_trajectory

    def test_seed_invariant_topics_up_to_permutation(self):
        # Well-separated topics should be recovered irrespective of the
        # initialization seed, up to column relabeling.
        truth = ModelParams(np.zeros(3), 0.4 * np.eye(3), block_beta(3, 30))
        gen = GenerativeConfig(upsilon_s=3, upsilon_n=40, seed=23)
        corpus, _ = generate(truth, gen, 60)
        betas = []
        for seed in (1, 2):
            params, _, _ = fit(
                corpus, TrainConfig(k=3, seed=seed, max_em_iters=40)
            )
            betas.append(params.beta)
        cost = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                cost[i, j] = 0.5 * np.abs(betas[0][:, i] - betas[1][:, j]).sum()
        rows, cols = linear_sum_assignment(cost)
        assert cost[rows, cols].mean() < 0.1
