"""Input validation helpers for the estimator API."""
from __future__ import annotations

from collections.abc import Sequence

from .core import Sample


def check_samples(X, obs_len: int | None = None, pred_len: int | None = None,
                  require_future: bool = True) -> list[Sample]:
    """Validate a sequence of :class:`Sample` and return it as a list.

    Raises ``TypeError`` for non-samples and ``ValueError`` for empty input or
    window lengths that do not match the model.
    """
    if isinstance(X, Sample):
        X = [X]
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)):
        raise TypeError(f"expected a sequence of Sample, got {type(X).__name__}")
    X = list(X)
    if not X:
        raise ValueError("found 0 samples; at least 1 is required")
    for i, s in enumerate(X):
        if not isinstance(s, Sample):
            raise TypeError(f"element {i} is {type(s).__name__}, not Sample")
        if obs_len is not None and s.obs_len != obs_len:
            raise ValueError(f"sample {i}: observed length {s.obs_len} != model obs_len {obs_len}")
        if require_future and pred_len is not None and s.pred_len != pred_len:
            raise ValueError(f"sample {i}: future length {s.pred_len} != model pred_len {pred_len}")
    return X


def check_k(k, default: int) -> int:
    k = default if k is None else k
    if int(k) != k or k < 1:
        raise ValueError(f"K must be a positive integer, got {k!r}")
    return int(k)
