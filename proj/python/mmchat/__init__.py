"""Image-augmented dialogue: preprocessing, retrieval, generation and metrics."""

from ._core import (
    Generator,
    MmchatError,
    Retriever,
    Vocabulary,
    __version__,
    aggregate_eval,
    metrics,
    preprocess,
    run_cli,
    selftest,
    tokenize,
)

__all__ = [
    "Generator",
    "MmchatError",
    "Retriever",
    "Vocabulary",
    "__version__",
    "aggregate_eval",
    "metrics",
    "preprocess",
    "run_cli",
    "selftest",
    "tokenize",
]
