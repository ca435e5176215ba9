import numpy as np
import pandas as pd
import pytest

from ratings import RatingMatrix


def write_ratings(path, rows, sep="\t"):
    path.write_text("".join(sep.join(str(v) for v in row) + "\n" for row in rows))
    return path


def toy_matrix(raw: np.ndarray) -> RatingMatrix:
    """RatingMatrix from a dense array of raw 0-5 ratings (0 = unrated), ids 1..m / 1..n."""
    raw = np.asarray(raw)
    users, items = np.nonzero(raw)
    frame = pd.DataFrame({"user_id": users + 1, "item_id": items + 1, "rating": raw[users, items]})
    return RatingMatrix.from_frame(frame, np.arange(1, raw.shape[0] + 1), np.arange(1, raw.shape[1] + 1))


def random_raw(rng, m, n, density=0.6):
    raw = rng.integers(1, 6, size=(m, n))
    raw[rng.random((m, n)) > density] = 0
    return raw


@pytest.fixture
def toy_raw():
    return np.array(
        [
            [5, 3, 0, 1],
            [4, 0, 0, 1],
            [1, 1, 0, 5],
            [1, 0, 0, 4],
            [0, 1, 5, 4],
        ]
    )


@pytest.fixture
def toy_train(toy_raw):
    return toy_matrix(toy_raw)


@pytest.fixture
def rating_file(tmp_path):
    """Small u.data file: 12 users x 15 items, every user with 8 ratings."""
    rng = np.random.default_rng(7)
    rows = []
    for user in range(1, 13):
        for item in sorted(rng.choice(np.arange(1, 16), size=8, replace=False)):
            rows.append((user, int(item), int(rng.integers(1, 6)), 880000000 + len(rows)))
    return write_ratings(tmp_path / "u.data", rows)
