"""Next-interval load-level forecasting.

Three statistical predictors share one estimator surface. Any object with
``predict_next(recent) -> int`` can stand in for them inside the control loop.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DomainError, TrainingError
from .trace import DEFAULT_NUM_LEVELS, LoadLevel

PREDICTOR_KINDS = ("last_value", "moving_average", "markov")


def _as_levels(seq, num_levels):
    out = np.fromiter((int(v) for v in seq), dtype=int)
    if out.size and (out.min() < 0 or out.max() >= num_levels):
        raise DomainError(f"levels must lie in [0, {num_levels - 1}]")
    return out


class LevelPredictor(BaseEstimator):
    """Forecast the next load level from a history of levels.

    Parameters
    ----------
    kind : {"last_value", "moving_average", "markov"}
    window : int
        Number of trailing levels averaged by ``moving_average``.
    num_levels : int
        Size of the level alphabet.

    After ``fit`` a markov model exposes ``transition_counts_``, a
    ``num_levels x num_levels`` matrix where cell ``[i, j]`` counts observed
    ``i -> j`` steps.
    """

    def __init__(self, kind="markov", window=3, num_levels=DEFAULT_NUM_LEVELS):
        self.kind = kind
        self.window = window
        self.num_levels = num_levels

    def _validate_params(self):
        if self.kind not in PREDICTOR_KINDS:
            raise DomainError(f"unknown predictor kind {self.kind!r}")
        if self.window < 1:
            raise DomainError("window must be >= 1")
        if self.num_levels < 1:
            raise DomainError("num_levels must be >= 1")

    def fit(self, history, y=None):
        self._validate_params()
        history = _as_levels(history, self.num_levels)
        needed = 2 if self.kind == "markov" else 1
        if history.size < needed:
            raise TrainingError(f"{self.kind} predictor needs at least {needed} levels of history")
        self.transition_counts_ = np.zeros((self.num_levels, self.num_levels), dtype=np.int64)
        if self.kind == "markov":
            np.add.at(self.transition_counts_, (history[:-1], history[1:]), 1)
        return self

    def partial_fit(self, history, y=None):
        """Add the transitions in ``history`` to the counts (online update)."""
        if not hasattr(self, "transition_counts_"):
            self._validate_params()
            self.transition_counts_ = np.zeros((self.num_levels, self.num_levels), dtype=np.int64)
        history = _as_levels(history, self.num_levels)
        if self.kind == "markov" and history.size >= 2:
            np.add.at(self.transition_counts_, (history[:-1], history[1:]), 1)
        return self

    def observe(self, previous: int, current: int) -> None:
        if self.kind == "markov":
            self.transition_counts_[previous, current] += 1

    def predict_next(self, recent) -> int:
        check_is_fitted(self, "transition_counts_")
        recent = _as_levels(recent, self.num_levels)
        if recent.size == 0:
            raise DomainError("predict_next needs at least one recent level")
        last = int(recent[-1])
        if self.kind == "last_value":
            return last
        if self.kind == "moving_average":
            mean = recent[-self.window:].mean()
            # round half up; numpy's round is banker's rounding
            return int(min(np.floor(mean + 0.5), self.num_levels - 1))
        row = self.transition_counts_[last]
        if row.sum() == 0:
            return last
        return int(np.argmax(row))  # argmax returns the lowest index on ties

    def predict(self, X):
        """Predict one next level per row of trailing-level windows."""
        return np.array([self.predict_next(row) for row in X], dtype=int)

    def transition_matrix(self) -> np.ndarray:
        """Row-normalized transition probabilities; unobserved rows stay zero."""
        check_is_fitted(self, "transition_counts_")
        counts = self.transition_counts_.astype(float)
        sums = counts.sum(axis=1, keepdims=True)
        return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def fit(
    history: Sequence[int | LoadLevel],
    kind: str = "markov",
    window: int = 3,
    num_levels: int = DEFAULT_NUM_LEVELS,
) -> LevelPredictor:
    return LevelPredictor(kind=kind, window=window, num_levels=num_levels).fit(history)


def predict_next(model: LevelPredictor, recent: Sequence[int | LoadLevel]) -> LoadLevel:
    return LoadLevel(model.predict_next(recent), model.num_levels)
