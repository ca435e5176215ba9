"""Accuracy and explainability metrics: RMSE, MAP@n and MEP@n."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from neighborhood import ExplainabilityMatrix
from ratings import RATING_SCALE, RatingMatrix, denormalize

logger = logging.getLogger(__name__)

RELEVANCE_THRESHOLD = 4


def rmse(predicted, actual, low: float = 1.0, high: float = float(RATING_SCALE)) -> float:
    """Root mean square error with predictions clipped to ``[low, high]``.

    Defaults are the raw 1-5 scale; pass ``low=0, high=1`` for normalized values.
    """
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if actual.size == 0:
        raise ValueError("empty test set")
    if predicted.shape != actual.shape:
        raise ValueError(f"{predicted.shape[0]} predictions for {actual.shape[0]} test ratings")
    errors = np.clip(predicted, low, high) - actual
    return float(np.sqrt(np.mean(errors ** 2)))


def holdout_rmse(predictions: np.ndarray, test: pd.DataFrame) -> Tuple[float, float]:
    """(raw-scale, normalized-scale) RMSE of an m x n normalized prediction matrix on the held-out ratings."""
    predicted = predictions[test["user_index"].to_numpy(), test["item_index"].to_numpy()]
    actual = test["rating"].to_numpy(dtype=float)
    raw = rmse(predicted * RATING_SCALE, actual * RATING_SCALE)
    normalized = rmse(predicted, actual, low=0.0, high=1.0)
    return raw, normalized


def global_mean_rmse(train: RatingMatrix, test: pd.DataFrame) -> float:
    """Raw-scale RMSE of predicting the mean training rating everywhere."""
    mean = train.values.data.mean() * RATING_SCALE
    actual = test["rating"].to_numpy(dtype=float) * RATING_SCALE
    return rmse(np.full(actual.shape, mean), actual)


@dataclass(frozen=True)
class TopNList:
    user: int
    items: Tuple[int, ...]
    scores: Tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items)


def top_n(predictions, train_mask, n_top: int, user: int = -1) -> TopNList:
    """Highest-scored items the user has not rated in training."""
    if n_top < 1:
        raise ValueError(f"n_top must be >= 1, got {n_top}")
    predictions = np.asarray(predictions, dtype=float)
    candidates = np.flatnonzero(~np.asarray(train_mask, dtype=bool))
    order = np.lexsort((candidates, -predictions[candidates]))[:n_top]
    chosen = candidates[order]
    return TopNList(
        user=user,
        items=tuple(int(i) for i in chosen),
        scores=tuple(float(s) for s in predictions[chosen]),
    )


def evaluated_users(test: pd.DataFrame) -> np.ndarray:
    """The evaluated user set: every user with at least one held-out rating."""
    return np.unique(test["user_index"].to_numpy())


def recommend(predictions: np.ndarray, train: RatingMatrix, users: Iterable[int], n_top: int) -> List[TopNList]:
    return [top_n(predictions[u], train.observed[u], n_top, user=int(u)) for u in users]


def mep_at_n(lists: Iterable[TopNList], explain: ExplainabilityMatrix, n_top: Optional[int] = None) -> float:
    """Mean share of explainable items (E > 0) per recommendation list.

    Users with an empty list are left out of the mean.
    """
    precisions = []
    for rec in lists:
        items = rec.items[:n_top] if n_top else rec.items
        if not items:
            continue
        explainable = explain.explainable(rec.user)
        precisions.append(np.count_nonzero(explainable[list(items)]) / len(items))
    return float(np.mean(precisions)) if precisions else 0.0


def relevant_items(test: pd.DataFrame, relevance_threshold: int = RELEVANCE_THRESHOLD) -> Dict[int, set]:
    raw = denormalize(test["rating"].to_numpy())
    liked = test[raw >= relevance_threshold]
    return liked.groupby("user_index")["item_index"].apply(set).to_dict()


def average_precision(items: Iterable[int], relevant: set, n_top: int) -> float:
    hits = 0
    total = 0.0
    for rank, item in enumerate(list(items)[:n_top], start=1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), n_top)


def map_at_n(
    lists: Iterable[TopNList],
    test: pd.DataFrame,
    n_top: int,
    relevance_threshold: int = RELEVANCE_THRESHOLD,
) -> float:
    """Mean average precision of the lists against held-out ratings >= the threshold.

    AP is normalized by min(|relevant|, n_top); users with no relevant
    held-out item are left out of the mean.
    """
    if not 1 <= relevance_threshold <= RATING_SCALE:
        raise ValueError(f"relevance threshold must be in [1, {RATING_SCALE}], got {relevance_threshold}")
    relevant = relevant_items(test, relevance_threshold)
    precisions = [
        average_precision(rec.items, relevant[rec.user], n_top)
        for rec in lists
        if relevant.get(rec.user)
    ]
    return float(np.mean(precisions)) if precisions else 0.0


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    rmse_normalized: float
    map_at_n: float
    mep_at_n: float
    n_top: int
    variant: str
    hidden_units: int
    neighborhood_size: int
    theta: float

    def as_row(self) -> Dict[str, object]:
        return asdict(self)


def evaluate(
    predictions: np.ndarray,
    train: RatingMatrix,
    test: pd.DataFrame,
    explain: ExplainabilityMatrix,
    n_top: int,
    variant: str,
    hidden_units: int,
    relevance_threshold: int = RELEVANCE_THRESHOLD,
) -> EvalReport:
    raw, normalized = holdout_rmse(predictions, test)
    lists = recommend(predictions, train, evaluated_users(test), n_top)
    return EvalReport(
        rmse=raw,
        rmse_normalized=normalized,
        map_at_n=map_at_n(lists, test, n_top, relevance_threshold),
        mep_at_n=mep_at_n(lists, explain, n_top),
        n_top=n_top,
        variant=variant,
        hidden_units=hidden_units,
        neighborhood_size=explain.neighborhood_size,
        theta=explain.theta,
    )
