"""Knowledge tracing with a small text encoder, plus a recurrent baseline.

Everything runs on numpy with a hand-rolled reverse-mode tape.
"""

from . import dataset, evaluation, interpret, models, numerics, tokenizer, training

__version__ = "0.1.0"

__all__ = ["dataset", "evaluation", "interpret", "models", "numerics", "tokenizer", "training"]
