"""Multilayer correlated topic model: a three-level logistic-normal topic
model (corpus / document / segment) fitted by variational EM, with held-out
perplexity evaluation and document-structure export."""

from .corpus import (
    Corpus,
    Document,
    PreprocessConfig,
    Segment,
    Vocabulary,
    ingest_baskets,
    ingest_text,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .errors import (
    ConvergenceWarning,
    DegenerateWordError,
    MctmError,
    NumericError,
    ParseError,
    ValidationError,
)
from .estep import EStepSchedule, estep_document
from .evaluate import (
    StructureGraph,
    export_structure_graph,
    infer_heldout,
    perplexity,
    perplexity_report,
    top_words,
    topic_proportions,
)
from .params import (
    GenerativeConfig,
    ModelParams,
    VarState,
    elbo_bound,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from .trainer import FitReport, TrainConfig, fit, generate, init_params

__version__ = "0.1.0"

__all__ = [
    "ConvergenceWarning",
    "Corpus",
    "DegenerateWordError",
    "Document",
    "EStepSchedule",
    "FitReport",
    "GenerativeConfig",
    "MctmError",
    "ModelParams",
    "NumericError",
    "ParseError",
    "PreprocessConfig",
    "Segment",
    "StructureGraph",
    "TrainConfig",
    "ValidationError",
    "VarState",
    "Vocabulary",
    "elbo_bound",
    "estep_document",
    "export_structure_graph",
    "fit",
    "generate",
    "infer_heldout",
    "ingest_baskets",
    "ingest_text",
    "init_params",
    "load_checkpoint",
    "load_corpus",
    "perplexity",
    "perplexity_report",
    "save_checkpoint",
    "save_corpus",
    "softmax",
    "split_corpus",
    "top_words",
    "topic_proportions",
]
