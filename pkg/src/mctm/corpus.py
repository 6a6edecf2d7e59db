"""Corpus ingestion and the canonical segmented bag-of-words representation.

A corpus is a list of documents; a document is a list of segments
(paragraphs of a text file, or shopping trips of a customer); a segment is
a sequence of word ids drawn from a shared vocabulary.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

_TOKEN_SPLIT = re.compile(r"[^0-9a-zA-Z]+")


@dataclass(frozen=True)
class PreprocessConfig:
    """Filtering rules applied during ingestion.

    Filtering order: stopwords, then corpus-wide minimum term frequency,
    then minimum segment length, then removal of empty documents.
    """

    min_term_frequency: int = 1
    min_segment_length: int = 1
    stopword_lists: tuple = ()
    lowercase: bool = True

    def __post_init__(self):
        if self.min_term_frequency < 1:
            raise ValidationError("min_term_frequency must be >= 1")
        if self.min_segment_length < 1:
            raise ValidationError("min_segment_length must be >= 1")

    def load_stopwords(self):
        words = set()
        for path in self.stopword_lists:
            text = Path(path).read_text(encoding="utf-8")
            for line in text.splitlines():
                token = line.strip()
                if token and not token.startswith("#"):
                    words.add(token.lower() if self.lowercase else token)
        return words


class Vocabulary:
    """Bijection between terms and word ids in [0, W)."""

    def __init__(self, terms):
        terms = tuple(terms)
        if not terms:
            raise ValidationError("vocabulary must contain at least one term")
        index = {t: i for i, t in enumerate(terms)}
        if len(index) != len(terms):
            raise ValidationError("duplicate terms in vocabulary")
        self.terms = terms
        self.index = index

    def __len__(self):
        return len(self.terms)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.terms == other.terms

    def __contains__(self, term):
        return term in self.index

    def sha1(self):
        """Content hash, embedded in checkpoints to detect corpus mismatches."""
        h = hashlib.sha1()
        for t in self.terms:
            h.update(t.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self.terms) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


class Segment:
    """A sequence of word ids plus its bag-of-words view.

    ``word_ids``/``counts`` give the unique ids and their multiplicities so
    that per-word updates can iterate word types instead of positions.
    """

    __slots__ = ("positions", "word_ids", "counts")

    def __init__(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        if positions.ndim != 1 or positions.size == 0:
            raise ValidationError("segment must contain at least one word")
        if np.any(positions < 0):
            raise ValidationError("negative word id")
        self.positions = positions
        self.word_ids, self.counts = np.unique(positions, return_counts=True)
        self.positions.setflags(write=False)
        self.word_ids.setflags(write=False)
        self.counts.setflags(write=False)

    @property
    def n_words(self):
        return int(self.positions.size)

    def __eq__(self, other):
        return isinstance(other, Segment) and np.array_equal(
            self.positions, other.positions
        )


class Document:
    __slots__ = ("label", "segments")

    def __init__(self, label, segments):
        segments = tuple(segments)
        if not segments:
            raise ValidationError(f"document {label!r} has no segments")
        self.label = str(label)
        self.segments = segments

    @property
    def n_segments(self):
        return len(self.segments)

    @property
    def n_words(self):
        return sum(s.n_words for s in self.segments)

    def __eq__(self, other):
        return (
            isinstance(other, Document)
            and self.label == other.label
            and self.segments == other.segments
        )


class Corpus:
    def __init__(self, documents, vocabulary):
        documents = tuple(documents)
        if not documents:
            raise ValidationError("corpus must contain at least one document")
        w = len(vocabulary)
        for doc in documents:
            for seg in doc.segments:
                if seg.word_ids[-1] >= w:
                    raise ValidationError(
                        f"document {doc.label!r} contains word id >= W={w}"
                    )
        self.documents = documents
        self.vocabulary = vocabulary

    @property
    def n_documents(self):
        return len(self.documents)

    @property
    def n_words(self):
        return sum(d.n_words for d in self.documents)

    @property
    def n_segments(self):
        return sum(d.n_segments for d in self.documents)

    def document(self, label):
        for doc in self.documents:
            if doc.label == label:
                return doc
        raise ValidationError(f"unknown document label {label!r}")

    def term_frequencies(self):
        """Corpus-wide occurrence count per word id, shape (W,)."""
        freq = np.zeros(len(self.vocabulary), dtype=np.int64)
        for doc in self.documents:
            for seg in doc.segments:
                np.add.at(freq, seg.word_ids, seg.counts)
        return freq

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.vocabulary == other.vocabulary
            and self.documents == other.documents
        )


def tokenize(text, lowercase=True):
    """Split on non-alphanumeric characters; drop empty tokens."""
    if lowercase:
        text = text.lower()
    return [t for t in _TOKEN_SPLIT.split(text) if t]


def _paragraphs(text):
    """Blank-line-delimited blocks of a text file."""
    blocks = re.split(r"\n\s*\n", text)
    return [b for b in blocks if b.strip()]


def _filter_and_build(raw_docs, config):
    """Apply the filtering pipeline to tokenized documents and build a Corpus.

    ``raw_docs`` is a list of (label, [segment-token-list, ...]) with
    stopwords already removed.
    """
    freq = Counter()
    for _, segs in raw_docs:
        for tokens in segs:
            freq.update(tokens)
    surviving = {t for t, c in freq.items() if c >= config.min_term_frequency}
    if not surviving:
        raise ValidationError("corpus empty after term-frequency filtering")

    vocab = Vocabulary(sorted(surviving))
    documents = []
    for label, segs in raw_docs:
        segments = []
        for tokens in segs:
            ids = [vocab.index[t] for t in tokens if t in surviving]
            if len(ids) >= config.min_segment_length:
                segments.append(Segment(ids))
        if segments:
            documents.append(Document(label, segments))
    if not documents:
        raise ValidationError("corpus empty after segment/document filtering")
    return Corpus(documents, vocab)


def ingest_text(files, config=PreprocessConfig()):
    """Build a corpus from text files; paragraphs are segments.

    Document labels are file stems. Raises OSError for unreadable files and
    ValidationError if nothing survives filtering.
    """
    stopwords = config.load_stopwords()
    raw_docs = []
    for path in files:
        path = Path(path)
        text = path.read_text(encoding="utf-8", errors="replace")
        segs = []
        for block in _paragraphs(text):
            tokens = [
                t for t in tokenize(block, config.lowercase) if t not in stopwords
            ]
            if tokens:
                segs.append(tokens)
        if segs:
            raw_docs.append((path.stem, segs))
    if not raw_docs:
        raise ValidationError("no non-empty documents found")
    return _filter_and_build(raw_docs, config)


def ingest_baskets(records_path, config=PreprocessConfig()):
    """Build a corpus from a CSV of (customer, trip, category) triples.

    One document per customer, one segment per trip (in order of first
    appearance); item categories are the words. Trips shorter than
    ``min_segment_length`` are dropped.
    """
    customers = {}  # customer -> {trip -> [category, ...]}, insertion-ordered
    with open(records_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != [
            "customer",
            "trip",
            "category",
        ]:
            raise ParseError("expected header 'customer,trip,category'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            customer, trip, category = (f.strip() for f in row)
            if not customer or not trip or not category:
                raise ParseError("empty field", line=lineno)
            customers.setdefault(customer, {}).setdefault(trip, []).append(category)

    raw_docs = [
        (customer, list(trips.values())) for customer, trips in customers.items()
    ]
    if not raw_docs:
        raise ValidationError("no basket records found")
    return _filter_and_build(raw_docs, config)


def split_corpus(corpus, held_out_labels):
    """Split into (training, held-out) corpora sharing the training vocabulary.

    Held-out words absent from the training vocabulary are dropped; held-out
    segments and documents left empty by that rule are dropped (logged).
    """
    held_out_labels = set(held_out_labels)
    if not held_out_labels:
        raise ValidationError("held-out label set must not be empty")
    known = {d.label for d in corpus.documents}
    unknown = held_out_labels - known
    if unknown:
        raise ValidationError(f"unknown document labels: {sorted(unknown)}")

    train_docs = [d for d in corpus.documents if d.label not in held_out_labels]
    held_docs = [d for d in corpus.documents if d.label in held_out_labels]
    if not train_docs:
        raise ValidationError("training split is empty")

    seen = set()
    for doc in train_docs:
        for seg in doc.segments:
            seen.update(seg.word_ids.tolist())
    old_terms = corpus.vocabulary.terms
    vocab = Vocabulary(sorted(old_terms[i] for i in seen))
    remap = np.full(len(old_terms), -1, dtype=np.int64)
    for i in seen:
        remap[i] = vocab.index[old_terms[i]]

    def rebuild(doc):
        segments = []
        for seg in doc.segments:
            ids = remap[seg.positions]
            ids = ids[ids >= 0]
            if ids.size:
                segments.append(Segment(ids))
        return Document(doc.label, segments) if segments else None

    train = Corpus([rebuild(d) for d in train_docs], vocab)
    held_rebuilt = [rebuild(d) for d in held_docs]
    dropped = sum(1 for d in held_rebuilt if d is None)
    if dropped:
        logger.warning(
            "%d held-out document(s) dropped: only out-of-vocabulary terms", dropped
        )
    held_rebuilt = [d for d in held_rebuilt if d is not None]
    if not held_rebuilt:
        raise ValidationError("held-out split is empty after vocabulary filtering")
    return train, Corpus(held_rebuilt, vocab)


def save_corpus(corpus, path, vocab_path=None):
    """Write the canonical JSON-lines corpus file plus the vocabulary sidecar."""
    path = Path(path)
    if vocab_path is None:
        vocab_path = path.with_suffix(".vocab")
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            fh.write(
                json.dumps(
                    {
                        "label": doc.label,
                        "segments": [s.positions.tolist() for s in doc.segments],
                    }
                )
            )
            fh.write("\n")
    corpus.vocabulary.save(vocab_path)


def load_corpus(path, vocab_path=None):
    path = Path(path)
    if vocab_path is None:
        vocab_path = path.with_suffix(".vocab")
    vocab = Vocabulary.load(vocab_path)
    documents = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                documents.append(
                    Document(rec["label"], [Segment(s) for s in rec["segments"]])
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return Corpus(documents, vocab)
