"""MovieLens rating ingestion: parsing, normalization, the holdout split and
the sparse user x item rating matrix the models train on."""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix

logger = logging.getLogger(__name__)

RATING_SCALE = 5
RATING_VALUES = (1, 2, 3, 4, 5)
COLUMNS = ["user_id", "item_id", "rating", "timestamp"]

# MovieLens 100K: every user has at least 20 ratings.
MIN_USER_RATINGS = 20
ML100K_SHAPE = (943, 1682, 100_000)

PathLike = Union[str, Path]


class RatingFileError(ValueError):
    """A rating file that cannot be read or holds an invalid line."""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RawRating:
    user_id: int
    item_id: int
    rating: int
    timestamp: int


def normalize(raw: int) -> float:
    """Map a 1-5 rating into (0, 1]; 0 stays free to mean "unobserved"."""
    if raw not in RATING_VALUES:
        raise ValueError(f"rating out of range: {raw!r}")
    return raw / RATING_SCALE


def denormalize(values) -> np.ndarray:
    """Inverse of ``normalize`` for stored entries, back on the integer scale."""
    return np.rint(np.asarray(values, dtype=float) * RATING_SCALE).astype(int)


def _read_table(path: Path, sep: str, has_header: bool) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            path,
            sep=sep,
            header=None,
            names=COLUMNS,
            dtype=str,
            skip_blank_lines=False,
            keep_default_na=False,
            skiprows=1 if has_header else 0,
        )
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=COLUMNS)
    except pd.errors.ParserError as exc:
        # pandas reports the offending line itself ("Expected 4 fields in line 7, saw 5")
        raise RatingFileError(f"malformed rating file {path}: {exc}") from exc
    except OSError as exc:
        raise RatingFileError(f"cannot read {path}: {exc}") from exc
    return frame


def parse_movielens(path: PathLike, csv: bool = False, has_header: bool = None) -> List[RawRating]:
    """Parse a MovieLens ``u.data`` file (``user<TAB>item<TAB>rating<TAB>timestamp``).

    With ``csv=True`` the fields are comma separated and, unless told
    otherwise, the first line is taken as a header row.
    Line order is preserved. Raises ``RatingFileError`` naming the line
    number of the first malformed line.
    """
    path = Path(path)
    if has_header is None:
        has_header = csv
    frame = _read_table(path, "," if csv else "\t", has_header)
    if frame.empty:
        return []

    first_line = 2 if has_header else 1
    frame.index = pd.RangeIndex(first_line, first_line + len(frame))
    cells = frame.fillna("").astype(str).apply(lambda col: col.str.strip())
    blank = (cells == "").all(axis=1)
    cells = cells[~blank]

    incomplete = (cells == "").any(axis=1)
    if incomplete.any():
        raise RatingFileError("expected 4 fields", line=int(incomplete.idxmax()))

    # plain integer text only; "3.0" or "3e0" is not a rating
    bad = ~cells.apply(lambda col: col.str.fullmatch(r"[+-]?\d+")).all(axis=1)
    if bad.any():
        raise RatingFileError("non-integer field", line=int(bad.idxmax()))
    numeric = cells.apply(pd.to_numeric).astype(np.int64)

    out_of_range = ~numeric["rating"].isin(RATING_VALUES)
    if out_of_range.any():
        line = int(out_of_range.idxmax())
        raise RatingFileError(f"rating out of range: {numeric.at[line, 'rating']}", line=line)

    duplicated = numeric.duplicated(subset=["user_id", "item_id"])
    if duplicated.any():
        raise RatingFileError("duplicate (user, item) pair", line=int(duplicated.idxmax()))

    ratings = [RawRating(*map(int, row)) for row in numeric[COLUMNS].itertuples(index=False)]
    logger.info("Parsed %d ratings from %s", len(ratings), path)
    return ratings


def ratings_frame(ratings: Iterable[RawRating]) -> pd.DataFrame:
    frame = pd.DataFrame([(r.user_id, r.item_id, r.rating, r.timestamp) for r in ratings], columns=COLUMNS)
    return frame.astype(np.int64)


def check_min_ratings(ratings: List[RawRating], minimum: int = MIN_USER_RATINGS, strict: bool = None) -> List[int]:
    """Return the user ids with fewer than ``minimum`` ratings.

    ``strict`` defaults to True on data shaped like MovieLens 100K, where the
    floor is a property of the dataset, and raises there; elsewhere the
    offenders are only logged.
    """
    frame = ratings_frame(ratings)
    if strict is None:
        shape = (frame["user_id"].nunique(), frame["item_id"].nunique(), len(frame))
        strict = shape == ML100K_SHAPE
    counts = frame.groupby("user_id").size()
    sparse_users = counts[counts < minimum].index.tolist()
    if sparse_users:
        message = f"{len(sparse_users)} users have fewer than {minimum} ratings (e.g. user {sparse_users[0]})"
        if strict:
            raise RatingFileError(message)
        logger.warning(message)
    return sparse_users


@dataclass(frozen=True, eq=False)
class RatingMatrix:
    """Sparse m x n matrix of normalized ratings plus the external id maps.

    ``user_ids[u]`` is the external id of dense user index ``u`` (same for
    items); both arrays are sorted ascending.
    """

    values: csr_matrix
    user_ids: np.ndarray
    item_ids: np.ndarray

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, user_ids: np.ndarray, item_ids: np.ndarray) -> "RatingMatrix":
        """Build from a frame with ``user_id``, ``item_id`` and raw ``rating`` columns."""
        rows = np.searchsorted(user_ids, frame["user_id"].to_numpy())
        cols = np.searchsorted(item_ids, frame["item_id"].to_numpy())
        data = frame["rating"].to_numpy(dtype=float) / RATING_SCALE
        values = csr_matrix((data, (rows, cols)), shape=(len(user_ids), len(item_ids)))
        values.sort_indices()
        return cls(values=values, user_ids=np.asarray(user_ids), item_ids=np.asarray(item_ids))

    @property
    def num_users(self) -> int:
        return self.values.shape[0]

    @property
    def num_items(self) -> int:
        return self.values.shape[1]

    @property
    def nnz(self) -> int:
        return self.values.nnz

    @cached_property
    def dense(self) -> np.ndarray:
        return self.values.toarray()

    @cached_property
    def observed(self) -> np.ndarray:
        return self.dense > 0

    @cached_property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.dense, axis=1)

    def user_index(self, user_id: int) -> int:
        return _lookup(self.user_ids, user_id, "user")

    def item_index(self, item_id: int) -> int:
        return _lookup(self.item_ids, item_id, "item")


def _lookup(ids: np.ndarray, external_id: int, kind: str) -> int:
    index = int(np.searchsorted(ids, external_id))
    if index >= len(ids) or ids[index] != external_id:
        raise ValueError(f"unknown {kind} id: {external_id}")
    return index


def user_vector(matrix: RatingMatrix, u: int) -> Tuple[np.ndarray, np.ndarray]:
    """Dense rating vector r^(u) (0 where unobserved) and its observed mask."""
    if not 0 <= u < matrix.num_users:
        raise IndexError(f"user index {u} out of range [0, {matrix.num_users})")
    row = matrix.values.getrow(u).toarray().ravel()
    return row, row > 0


@dataclass(frozen=True, eq=False)
class DataSplit:
    """Holdout split. ``test`` has ``user_index``, ``item_index`` and normalized ``rating`` columns."""

    train: RatingMatrix
    test: pd.DataFrame
    split_seed: int

    @property
    def num_test(self) -> int:
        return len(self.test)


def _test_size(total: int, test_fraction: float) -> int:
    size = int(round(test_fraction * total))
    if total >= 2:
        size = min(max(size, 1), total - 1)
    return size


def split(ratings: List[RawRating], test_fraction: float = 0.1, seed: int = 0, per_user: bool = False) -> DataSplit:
    """Random holdout split over individual ratings.

    ``per_user=True`` holds out the same fraction of each user's ratings
    instead of sampling uniformly over the whole file.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if not ratings:
        raise ValueError("cannot split an empty rating list")

    frame = ratings_frame(ratings)
    rng = np.random.default_rng(seed)
    if per_user:
        test_positions = []
        for _, group in frame.groupby("user_id", sort=True):
            size = int(round(test_fraction * len(group))) if len(group) > 1 else 0
            test_positions.extend(rng.permutation(group.index.to_numpy())[:size])
        is_test = np.zeros(len(frame), dtype=bool)
        is_test[np.asarray(test_positions, dtype=int)] = True
    else:
        order = rng.permutation(len(frame))
        is_test = np.zeros(len(frame), dtype=bool)
        is_test[order[: _test_size(len(frame), test_fraction)]] = True

    # index maps cover users and items that only occur in the test portion
    user_ids = np.unique(frame["user_id"].to_numpy())
    item_ids = np.unique(frame["item_id"].to_numpy())
    train = RatingMatrix.from_frame(frame[~is_test], user_ids, item_ids)

    held_out = frame[is_test].sort_values(["user_id", "item_id"])
    test = pd.DataFrame(
        {
            "user_index": np.searchsorted(user_ids, held_out["user_id"].to_numpy()),
            "item_index": np.searchsorted(item_ids, held_out["item_id"].to_numpy()),
            "rating": held_out["rating"].to_numpy(dtype=float) / RATING_SCALE,
        }
    ).reset_index(drop=True)

    logger.info(
        "Split %d ratings into %d train / %d test (seed=%d, per_user=%s)",
        len(frame), train.nnz, len(test), seed, per_user,
    )
    return DataSplit(train=train, test=test, split_seed=seed)


def write_split_manifest(data: DataSplit, path: PathLike) -> pd.DataFrame:
    """Write ``user_id,item_id,rating,fold`` rows (raw ratings) for reproducibility audits."""
    train = data.train
    coo = train.values.tocoo()
    train_rows = pd.DataFrame(
        {
            "user_id": train.user_ids[coo.row],
            "item_id": train.item_ids[coo.col],
            "rating": denormalize(coo.data),
            "fold": "train",
        }
    )
    test_rows = pd.DataFrame(
        {
            "user_id": train.user_ids[data.test["user_index"].to_numpy()],
            "item_id": train.item_ids[data.test["item_index"].to_numpy()],
            "rating": denormalize(data.test["rating"].to_numpy()),
            "fold": "test",
        }
    )
    manifest = pd.concat([train_rows, test_rows], ignore_index=True)
    manifest = manifest.sort_values(["user_id", "item_id"]).reset_index(drop=True)
    manifest.to_csv(path, index=False)
    return manifest
