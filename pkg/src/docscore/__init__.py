"""Document score regression on paragraph vectors, with an embedded streaming scorer.

Offline: learn paragraph vectors for a labeled corpus, fit linear and SVR
regressors to the scores, persist both. Online: consume unlabeled
documents from an append-only broker in micro-batches, infer vectors,
predict scores, and store them in a time-series store with rolling bands
and threshold alerts.
"""
from ._accel import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
