"""Held-out inference, perplexity estimation, topic summaries and the
document-structure graph export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .corpus import Document, Segment
from .errors import NumericError, ValidationError
from .estep import EStepSchedule, estep_document
from .params import initial_doc_state, softmax

DEFAULT_SAMPLES = 2000


def _split_observed(doc, observed_fraction, rng):
    """Per segment, pick ceil(fraction * N) positions (seeded, uniform,
    order-preserving) as observed; the complement is scored."""
    if not 0.0 < observed_fraction <= 1.0:
        raise ValidationError("observed_fraction must be in (0, 1]")
    if observed_fraction == 1.0:
        return doc, [np.array([], dtype=np.int64) for _ in doc.segments]
    observed_segments = []
    heldout_positions = []
    for seg in doc.segments:
        n = seg.n_words
        n_obs = math.ceil(observed_fraction * n)
        idx = np.sort(rng.choice(n, size=n_obs, replace=False))
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        observed_segments.append(Segment(seg.positions[idx]))
        heldout_positions.append(seg.positions[~mask])
    observed_doc = Document(doc.label, observed_segments)
    if observed_doc.n_words == 0:
        raise ValidationError("observed subset is empty")
    return observed_doc, heldout_positions


def infer_heldout(params, doc, schedule=EStepSchedule(), observed_fraction=1.0,
                  seed=0):
    """Fit variational parameters for an unseen document with the model
    hyperparameters frozen.

    With ``observed_fraction < 1`` a seeded uniform subset of positions per
    segment is used for inference. Returns the document's variational state
    (over the observed subset).
    """
    rng = np.random.default_rng([seed, _label_seed(doc.label)])
    observed_doc, _ = _split_observed(doc, observed_fraction, rng)
    state, _ = estep_document(
        params, observed_doc, initial_doc_state(params, observed_doc), schedule
    )
    return state


def _label_seed(label):
    """Stable non-negative integer derived from a document label."""
    return sum(b * 257**i for i, b in enumerate(label.encode("utf-8")[:6]))


def _gauss_logpdf(x, mean, sigma_inv, sigma_logdet):
    """Log-density of rows of x under N(mean, Sigma), (T,)."""
    d = x - mean
    k = x.shape[-1]
    quad = ((d @ sigma_inv) * d).sum(axis=-1)
    return -0.5 * (quad + sigma_logdet + k * math.log(2.0 * math.pi))


def _diag_gauss_logpdf(x, mean, var):
    d = x - mean
    return -0.5 * (
        (d * d / var).sum(axis=-1)
        + np.log(var).sum()
        + x.shape[-1] * math.log(2.0 * math.pi)
    )


def _segment_loglik(params, eta, ids):
    """Log-likelihood of one segment's words for each eta row, (T,)."""
    uniq, counts = np.unique(ids, return_counts=True)
    props = softmax(eta)  # (T, K)
    word_probs = props @ params.beta[uniq].T  # (T, U)
    with np.errstate(divide="ignore"):
        return np.log(word_probs) @ counts


def _doc_log_likelihood_samples(params, state, conditioned_per_segment,
                                scored_per_segment, n_samples, rng):
    """Per-sample scored-word log-likelihoods and log importance weights.

    Draws (gamma, eta) from the variational posterior q and weights each
    sample by prior(gamma, eta) * likelihood(conditioned words) / q, so the
    weighted harmonic mean targets p(scored | conditioned) exactly (q is
    only the proposal). In whole-document scoring the conditioned sets are
    empty, the weight reduces to prior / q, and the target is the document
    marginal p(w_d).
    """
    k = params.k
    gamma = state.lam + np.sqrt(state.v2) * rng.standard_normal((n_samples, k))
    log_w = _gauss_logpdf(gamma, params.mu, params.sigma_inv, params.sigma_logdet)
    log_w -= _diag_gauss_logpdf(gamma, state.lam, state.v2)
    total = np.zeros(n_samples)
    for s, ids in enumerate(scored_per_segment):
        eta = state.xi[s] + np.sqrt(state.m2[s]) * rng.standard_normal(
            (n_samples, k)
        )
        log_w += _gauss_logpdf(eta, gamma, params.sigma_inv, params.sigma_logdet)
        log_w -= _diag_gauss_logpdf(eta, state.xi[s], state.m2[s])
        cond = conditioned_per_segment[s]
        if cond.size:
            log_w += _segment_loglik(params, eta, cond)
        if ids.size:
            total += _segment_loglik(params, eta, ids)
    return total, log_w


@dataclass
class DocEvaluation:
    label: str
    log_likelihood: float  # harmonic-mean estimate of log P(scored words)
    n_scored: int
    se: float  # delta-method standard error of the estimate


@dataclass
class PerplexityReport:
    perplexity: float
    n_scored: int
    documents: list = field(default_factory=list)

    def to_dict(self):
        return {
            "perplexity": self.perplexity,
            "n_scored_words": self.n_scored,
            "documents": [
                {
                    "label": d.label,
                    "log_likelihood": d.log_likelihood,
                    "n_scored_words": d.n_scored,
                    "se": d.se,
                }
                for d in self.documents
            ],
        }


def perplexity_report(params, heldout, samples=DEFAULT_SAMPLES,
                      schedule=EStepSchedule(), observed_fraction=1.0, seed=0):
    """Held-out perplexity with per-document detail.

    Per document, the marginal likelihood of the scored words is estimated
    by the harmonic-mean method with the fitted variational posterior as
    the proposal: draw eta from q, average the reciprocal conditional
    likelihoods (via log-sum-exp). With ``observed_fraction < 1`` inference
    uses the observed subset and the complement is scored (document
    completion); otherwise the whole document is both inferred and scored.
    """
    if samples < 2:
        raise ValidationError("need at least 2 samples")
    doc_evals = []
    total_loglik = 0.0
    total_scored = 0
    for d, doc in enumerate(heldout.documents):
        rng = np.random.default_rng([seed, _label_seed(doc.label)])
        observed_doc, heldout_positions = _split_observed(
            doc, observed_fraction, rng
        )
        state, _ = estep_document(
            params, observed_doc, initial_doc_state(params, observed_doc), schedule
        )
        empty = [np.array([], dtype=np.int64) for _ in doc.segments]
        if observed_fraction == 1.0:
            scored = [seg.positions for seg in doc.segments]
            conditioned = empty
        else:
            scored = heldout_positions
            conditioned = [seg.positions for seg in observed_doc.segments]
        n_scored = int(sum(p.size for p in scored))
        if n_scored == 0:
            continue
        logliks, log_w = _doc_log_likelihood_samples(
            params, state, conditioned, scored, samples, rng
        )
        # Weighted harmonic mean in log space: the self-normalized ratio
        # logsumexp(log w + L) - logsumexp(log w).
        log_p = logsumexp(log_w + logliks) - logsumexp(log_w)
        if not np.isfinite(log_p):
            raise NumericError(
                f"non-finite likelihood estimate for document {doc.label!r}"
            )
        # Delta-method standard error of the log of the ratio estimator.
        a = np.exp(log_w + logliks - (log_w + logliks).max())
        b = np.exp(log_w - log_w.max())
        d = a / a.mean() - b / b.mean()
        se = float(d.std(ddof=1) / math.sqrt(samples))
        doc_evals.append(DocEvaluation(doc.label, float(log_p), n_scored, se))
        total_loglik += log_p
        total_scored += n_scored
    if total_scored == 0:
        raise ValidationError("no words to score")
    perp = math.exp(-total_loglik / total_scored)
    return PerplexityReport(perplexity=perp, n_scored=total_scored,
                            documents=doc_evals)


def perplexity(params, heldout, samples=DEFAULT_SAMPLES,
               schedule=EStepSchedule(), observed_fraction=1.0, seed=0):
    """Held-out perplexity (lower is better); see :func:`perplexity_report`."""
    return perplexity_report(
        params, heldout, samples, schedule, observed_fraction, seed
    ).perplexity


def top_words(params, vocab, topic, n):
    """The n highest-probability terms of one topic; ties break by word id."""
    if not 0 <= topic < params.k:
        raise ValidationError(f"topic index {topic} out of range")
    col = params.beta[:, topic]
    order = np.argsort(-col, kind="stable")[:n]
    return [vocab.terms[i] for i in order]


def topic_proportions(dstate, level, segment=None):
    """Posterior topic proportions: softmax of the document mean
    (level='document') or of one segment's mean (level='segment')."""
    if level == "document":
        return softmax(dstate.lam)
    if level == "segment":
        if segment is None:
            raise ValidationError("segment index required at segment level")
        return softmax(dstate.xi[segment])
    raise ValidationError(f"unknown level {level!r}")


@dataclass
class GraphNode:
    node_id: str
    proportions: np.ndarray | None
    top_terms: list


@dataclass
class StructureGraph:
    """Document/paragraph/topic nodes with proportion-thresholded edges."""

    document: GraphNode
    paragraphs: list
    topics: list
    edges: list  # (node_id, topic_index) pairs
    threshold: float

    def to_dict(self):
        def node(nd):
            d = {"id": nd.node_id, "top_terms": nd.top_terms}
            if nd.proportions is not None:
                d["proportions"] = [float(p) for p in nd.proportions]
            return d

        return {
            "document": node(self.document),
            "paragraphs": [node(p) for p in self.paragraphs],
            "topics": [node(t) for t in self.topics],
            "edges": [[nid, int(k)] for nid, k in self.edges],
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def to_dot(self):
        """Graphviz rendering: rectangles for topics, ellipses for
        paragraphs and the document node."""
        lines = ["graph document_structure {"]
        doc_label = _dot_escape(
            f"{self.document.node_id}\\n" + ", ".join(self.document.top_terms)
        )
        lines.append(
            f'  "{self.document.node_id}" [shape=ellipse, style=bold, '
            f'label="{doc_label}"];'
        )
        for p in self.paragraphs:
            label = _dot_escape(f"{p.node_id}\\n" + ", ".join(p.top_terms))
            lines.append(f'  "{p.node_id}" [shape=ellipse, label="{label}"];')
        for t in self.topics:
            label = _dot_escape(f"{t.node_id}\\n" + ", ".join(t.top_terms))
            lines.append(f'  "{t.node_id}" [shape=rectangle, label="{label}"];')
        for nid, k in self.edges:
            lines.append(f'  "{nid}" -- "t{k}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _dot_escape(text):
    return text.replace('"', r"\"")


def _segment_top_terms(seg, vocab, n):
    """Most frequent terms of a segment; ties break by word id."""
    order = np.argsort(-seg.counts, kind="stable")[:n]
    return [vocab.terms[int(seg.word_ids[i])] for i in order]


def _document_top_terms(doc, vocab, n):
    counts = {}
    for seg in doc.segments:
        for wid, c in zip(seg.word_ids, seg.counts):
            counts[int(wid)] = counts.get(int(wid), 0) + int(c)
    order = sorted(counts, key=lambda wid: (-counts[wid], wid))[:n]
    return [vocab.terms[i] for i in order]


def export_structure_graph(params, dstate, doc, vocab, threshold=0.01, top_n=5):
    """Build the document-structure graph: an edge links a document or
    paragraph node to every topic whose proportion exceeds ``threshold``."""
    dstate.validate(params.k, doc)
    doc_props = topic_proportions(dstate, "document")
    doc_node = GraphNode("doc", doc_props, _document_top_terms(doc, vocab, top_n))
    edges = [("doc", k) for k in range(params.k) if doc_props[k] > threshold]

    paragraphs = []
    for s, seg in enumerate(doc.segments):
        props = topic_proportions(dstate, "segment", s)
        node_id = f"p{s}"
        paragraphs.append(
            GraphNode(node_id, props, _segment_top_terms(seg, vocab, top_n))
        )
        edges.extend(
            (node_id, k) for k in range(params.k) if props[k] > threshold
        )

    used_topics = sorted({k for _, k in edges})
    topics = [
        GraphNode(f"t{k}", None, top_words(params, vocab, k, top_n))
        for k in used_topics
    ]
    return StructureGraph(
        document=doc_node,
        paragraphs=paragraphs,
        topics=topics,
        edges=edges,
        threshold=threshold,
    )
