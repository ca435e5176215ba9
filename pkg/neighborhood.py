"""User-based neighborhood explainability scores.

For user u and item i the score is the expected rating of i among u's
nearest neighbors (by cosine similarity over training ratings). Scores at or
below a threshold theta are zeroed, and the survivors are divided by the
rating scale so the explainability vector lives on the same [0, 1] scale as
the normalized ratings.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix, issparse

from ratings import RATING_SCALE, RATING_VALUES, RatingMatrix, denormalize

logger = logging.getLogger(__name__)

# Ties that differ only by summation order compare equal at this precision.
SIMILARITY_DECIMALS = 12


@dataclass(frozen=True)
class NeighborSet:
    user: int
    neighbors: Tuple[Tuple[int, float], ...]

    @property
    def indices(self) -> np.ndarray:
        return np.array([v for v, _ in self.neighbors], dtype=int)

    def __len__(self) -> int:
        return len(self.neighbors)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.dot(a, b) / norm)


def similarity_row(matrix: RatingMatrix, u: int) -> np.ndarray:
    """Cosine similarity of user u to every user, missing ratings counted as 0."""
    if not 0 <= u < matrix.num_users:
        raise IndexError(f"user index {u} out of range [0, {matrix.num_users})")
    dense = matrix.dense
    norms = matrix.row_norms
    denominators = norms * norms[u]
    dots = dense @ dense[u]
    sims = np.divide(dots, denominators, out=np.zeros_like(dots), where=denominators > 0)
    return np.round(sims, SIMILARITY_DECIMALS)


def find_neighbors(matrix: RatingMatrix, u: int, size: int) -> NeighborSet:
    """The ``size`` users most similar to u, ties broken by ascending index."""
    if size < 1:
        raise ValueError(f"neighborhood size must be >= 1, got {size}")
    sims = similarity_row(matrix, u)
    candidates = np.delete(np.arange(matrix.num_users), u)
    order = np.lexsort((candidates, -sims[candidates]))[:size]
    chosen = candidates[order]
    return NeighborSet(user=u, neighbors=tuple((int(v), float(sims[v])) for v in chosen))


def _neighbor_ratings(train: RatingMatrix, neighbors: NeighborSet, items=slice(None)) -> np.ndarray:
    # raw 1-5 ratings of the neighbors, 0 where unrated
    return denormalize(train.dense[neighbors.indices][:, items])


def rating_probability(train: RatingMatrix, neighbors: NeighborSet, i: int, x: int) -> float:
    """Share of u's neighbors that gave item i the raw rating x."""
    if x not in RATING_VALUES:
        raise ValueError(f"rating out of range: {x!r}")
    if len(neighbors) == 0:
        return 0.0
    column = _neighbor_ratings(train, neighbors, i)
    return int(np.count_nonzero(column == x)) / len(neighbors)


def neighbor_histogram(train: RatingMatrix, neighbors: NeighborSet, i: int) -> Dict[int, int]:
    """``{x: count}`` of neighbor ratings on item i, rating values that occur only."""
    if len(neighbors) == 0:
        return {}
    column = _neighbor_ratings(train, neighbors, i)
    return {x: int(np.count_nonzero(column == x)) for x in RATING_VALUES if np.any(column == x)}


def _expected_ratings(neighbor_ratings: np.ndarray, size: int) -> np.ndarray:
    scores = np.zeros(neighbor_ratings.shape[1:])
    if size == 0:
        return scores
    for x in RATING_VALUES:
        scores += x * (np.count_nonzero(neighbor_ratings == x, axis=0) / size)
    return scores


def explainability_score(train: RatingMatrix, neighbors: NeighborSet, i: int) -> float:
    """Expected raw rating of item i over u's neighborhood, in [0, 5]."""
    column = _neighbor_ratings(train, neighbors, [i])
    return float(_expected_ratings(column, len(neighbors))[0])


@dataclass(frozen=True, eq=False)
class ExplainabilityMatrix:
    """Thresholded explainability scores, row u being the vector e fed to the model."""

    scores: Union[np.ndarray, csr_matrix]
    theta: float
    neighborhood_size: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape

    def to_dense(self) -> np.ndarray:
        return self.scores.toarray() if issparse(self.scores) else np.asarray(self.scores)

    def row(self, u: int) -> np.ndarray:
        if issparse(self.scores):
            return self.scores.getrow(u).toarray().ravel()
        return np.asarray(self.scores[u])

    def explainable(self, u: int) -> np.ndarray:
        return self.row(u) > 0

    def nonzero_count(self) -> int:
        if issparse(self.scores):
            return int(self.scores.count_nonzero())
        return int(np.count_nonzero(self.scores))

    def matches(self, neighborhood_size: int, theta: float) -> bool:
        return self.neighborhood_size == neighborhood_size and float(self.theta) == float(theta)

    def save_csv(self, path: Union[str, Path], user_ids: np.ndarray, item_ids: np.ndarray) -> None:
        """Write nonzero entries as ``user_id,item_id,score`` under a parameter header."""
        users, items = np.nonzero(self.to_dense())
        frame = pd.DataFrame(
            {
                "user_id": user_ids[users],
                "item_id": item_ids[items],
                "score": self.to_dense()[users, items],
            }
        )
        with open(path, "w", newline="") as handle:
            handle.write(f"# neighborhood_size={self.neighborhood_size}\n")
            handle.write(f"# theta={float(self.theta)!r}\n")
            handle.write(f"# shape={self.shape[0]}x{self.shape[1]}\n")
            frame.to_csv(handle, index=False, float_format="%.17g")

    @classmethod
    def load_csv(cls, path: Union[str, Path], user_ids: np.ndarray, item_ids: np.ndarray, sparse: bool = False) -> "ExplainabilityMatrix":
        header = {}
        with open(path) as handle:
            for line in handle:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
        missing = {"neighborhood_size", "theta", "shape"} - header.keys()
        if missing:
            raise ValueError(f"{path}: explainability header lacks {sorted(missing)}")
        if header["shape"] != f"{len(user_ids)}x{len(item_ids)}":
            raise ValueError(f"{path}: shape {header['shape']} does not match the rating matrix")

        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        rows = np.searchsorted(user_ids, frame["user_id"].to_numpy(dtype=np.int64))
        cols = np.searchsorted(item_ids, frame["item_id"].to_numpy(dtype=np.int64))
        scores = csr_matrix((frame["score"].to_numpy(dtype=float), (rows, cols)), shape=(len(user_ids), len(item_ids)))
        return cls(
            scores=scores if sparse else scores.toarray(),
            theta=float(header["theta"]),
            neighborhood_size=int(header["neighborhood_size"]),
        )


def _explainability_row(train: RatingMatrix, u: int, size: int, theta: float) -> np.ndarray:
    neighbors = find_neighbors(train, u, size)
    scores = _expected_ratings(_neighbor_ratings(train, neighbors), len(neighbors))
    scores[scores <= theta] = 0.0
    return scores / RATING_SCALE


def build_explainability_matrix(
    train: RatingMatrix,
    size: int,
    theta: float,
    workers: int = 1,
    sparse: bool = False,
) -> ExplainabilityMatrix:
    """Explainability matrix over the training ratings.

    Rows are independent, so ``workers > 1`` fans users out over a thread
    pool; each task writes only its own row.
    """
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    if size < 1:
        raise ValueError(f"neighborhood size must be >= 1, got {size}")

    scores = np.zeros((train.num_users, train.num_items))
    train.row_norms  # materialize cached arrays before any threads read them

    def fill(u: int) -> None:
        scores[u] = _explainability_row(train, u, size, theta)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(fill, range(train.num_users)))
    else:
        for u in range(train.num_users):
            fill(u)

    explain = ExplainabilityMatrix(
        scores=csr_matrix(scores) if sparse else scores,
        theta=float(theta),
        neighborhood_size=size,
    )
    logger.info(
        "Built explainability matrix |N_u|=%d theta=%g: %d of %d entries explainable",
        size, theta, explain.nonzero_count(), scores.size,
    )
    return explain
