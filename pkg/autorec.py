"""User-based AutoRec and its explainable variant, in plain numpy.

    h     = sigmoid(W1 x + b)          x = r, or [r || e] for the explainable model
    r_hat = W2 h + b'
    loss  = sum_u || mask_u * (r_u - r_hat_u) ||^2 + lam/2 (||W1||_F^2 + ||W2||_F^2)

Gradients are derived by hand and the model is fitted with mini-batch
gradient descent over users.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from metrics import holdout_rmse
from neighborhood import ExplainabilityMatrix
from ratings import DataSplit, RatingMatrix

logger = logging.getLogger(__name__)

BASELINE = "baseline"
EXPLAINABLE = "explainable"
VARIANTS = (BASELINE, EXPLAINABLE)

# How the explainable model combines r and e: concatenation, or an experimental elementwise sum.
CONCAT = "concat"
SUM = "sum"
INPUT_MODES = (CONCAT, SUM)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ["epoch", "train_loss", "test_rmse", "test_rmse_normalized"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"training diverged at epoch {epoch}: loss = {value}")


@dataclass
class TrainConfig:
    hidden_units: int = 300
    lam: float = 0.01
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    variant: str = BASELINE
    theta: float = 0.0
    neighborhood_size: int = 50
    input_mode: str = CONCAT
    momentum: float = 0.0

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValueError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def input_dim(variant: str, n: int, input_mode: str = CONCAT) -> int:
    return 2 * n if variant == EXPLAINABLE and input_mode == CONCAT else n


@dataclass(eq=False)
class ModelParams:
    W1: np.ndarray  # k x d
    b: np.ndarray  # k
    W2: np.ndarray  # n x k
    b_prime: np.ndarray  # n
    variant: str = BASELINE
    input_mode: str = CONCAT

    @property
    def hidden_units(self) -> int:
        return self.W1.shape[0]

    @property
    def num_items(self) -> int:
        return self.W2.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.W1.copy(), self.b.copy(), self.W2.copy(), self.b_prime.copy(), self.variant, self.input_mode)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.W1, self.b, self.W2, self.b_prime))


@dataclass(eq=False)
class Gradients:
    W1: np.ndarray
    b: np.ndarray
    W2: np.ndarray
    b_prime: np.ndarray


@dataclass(eq=False)
class Batch:
    """Rows of user rating vectors (0 = unobserved), their masks and optional e vectors."""

    ratings: np.ndarray
    mask: np.ndarray
    explain: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.ratings.shape[0]


@dataclass(eq=False)
class ForwardCache:
    input: np.ndarray
    h: np.ndarray
    r_hat: np.ndarray
    mask: np.ndarray


def init_params(config: TrainConfig, n: int, seed: Optional[int] = None) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if n < 1:
        raise ValueError(f"item count must be >= 1, got {n}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    k = config.hidden_units
    d = input_dim(config.variant, n, config.input_mode)
    limit1 = np.sqrt(6.0 / (d + k))
    limit2 = np.sqrt(6.0 / (k + n))
    return ModelParams(
        W1=rng.uniform(-limit1, limit1, size=(k, d)),
        b=np.zeros(k),
        W2=rng.uniform(-limit2, limit2, size=(n, k)),
        b_prime=np.zeros(n),
        variant=config.variant,
        input_mode=config.input_mode,
    )


def _model_input(params: ModelParams, r: np.ndarray, e: Optional[np.ndarray]) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    n = params.num_items
    if r.shape[-1] != n:
        raise ValueError(f"rating vector has length {r.shape[-1]}, model expects {n}")
    if params.variant == BASELINE:
        if e is not None:
            raise ValueError("the baseline model takes no explainability vector")
        return r
    if e is None:
        raise ValueError("the explainable model needs an explainability vector")
    e = np.asarray(e, dtype=float)
    if e.shape != r.shape:
        raise ValueError(f"explainability vector shape {e.shape} does not match ratings {r.shape}")
    if params.input_mode == SUM:
        return r + e
    return np.concatenate([r, e], axis=-1)


def encode(params: ModelParams, r, e=None) -> np.ndarray:
    """Hidden activation for one vector (length n) or a batch of rows."""
    x = _model_input(params, r, e)
    return expit(x @ params.W1.T + params.b)


def decode(params: ModelParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != params.hidden_units:
        raise ValueError(f"hidden vector has length {h.shape[-1]}, model has {params.hidden_units} units")
    return h @ params.W2.T + params.b_prime


def forward(params: ModelParams, batch: Batch) -> ForwardCache:
    x = _model_input(params, batch.ratings, batch.explain)
    h = expit(x @ params.W1.T + params.b)
    return ForwardCache(input=x, h=h, r_hat=decode(params, h), mask=batch.mask)


def _regularizer(params: ModelParams, lam: float) -> float:
    return lam / 2 * (np.sum(params.W1 ** 2) + np.sum(params.W2 ** 2))


def loss(params: ModelParams, batch: Batch, lam: float) -> float:
    """Reconstruction error on observed entries plus the L2 penalty."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cache = forward(params, batch)
    error = np.where(cache.mask, batch.ratings - cache.r_hat, 0.0)
    return float(np.sum(error ** 2) + _regularizer(params, lam))


def gradients(params: ModelParams, batch: Batch, lam: float) -> Gradients:
    if len(batch) == 0:
        raise ValueError("empty batch")
    cache = forward(params, batch)
    delta_out = 2.0 * np.where(cache.mask, cache.r_hat - batch.ratings, 0.0)
    delta_hidden = (delta_out @ params.W2) * cache.h * (1.0 - cache.h)
    return Gradients(
        W1=delta_hidden.T @ cache.input + lam * params.W1,
        b=delta_hidden.sum(axis=0),
        W2=delta_out.T @ cache.h + lam * params.W2,
        b_prime=delta_out.sum(axis=0),
    )


class GradientDescent:
    """Mini-batch gradient descent, with optional classical momentum (off by default)."""

    def __init__(self, learning_rate: float = 0.01, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = {}

    def step(self, params: ModelParams, grads: Gradients) -> None:
        for name in ("W1", "b", "W2", "b_prime"):
            update = self.learning_rate * getattr(grads, name)
            if self.momentum:
                update = self.momentum * self._velocity.get(name, 0.0) + update
                self._velocity[name] = update
            getattr(params, name)[...] -= update


def explain_rows(explain: Optional[ExplainabilityMatrix]) -> Optional[np.ndarray]:
    return None if explain is None else explain.to_dense()


def make_batch(train: RatingMatrix, users, explain_dense: Optional[np.ndarray] = None) -> Batch:
    users = np.asarray(users, dtype=int)
    return Batch(
        ratings=train.dense[users],
        mask=train.observed[users],
        explain=None if explain_dense is None else explain_dense[users],
    )


def predict(params: ModelParams, train_row, e_row=None) -> np.ndarray:
    """Predicted ratings (normalized scale, unclipped) for every item."""
    return decode(params, encode(params, train_row, e_row))


def predict_matrix(params: ModelParams, train: RatingMatrix, explain: Optional[ExplainabilityMatrix] = None) -> np.ndarray:
    return predict(params, train.dense, explain_rows(explain))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    test_rmse: float
    test_rmse_normalized: float


ProgressSink = Callable[[EpochStats], None]


class CsvProgressSink:
    """Appends ``epoch,train_loss,test_rmse`` rows to a CSV file as training runs."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        pd.DataFrame(columns=["epoch", "train_loss", "test_rmse"]).to_csv(self.path, index=False)

    def __call__(self, stats: EpochStats) -> None:
        row = pd.DataFrame([[stats.epoch, stats.train_loss, stats.test_rmse]])
        row.to_csv(self.path, mode="a", header=False, index=False)


@dataclass(eq=False)
class TrainResult:
    params: ModelParams
    history: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=HISTORY_COLUMNS))


def train(
    data: DataSplit,
    explain: Optional[ExplainabilityMatrix],
    config: TrainConfig,
    progress: Optional[ProgressSink] = None,
) -> TrainResult:
    """Fit the model on the training split.

    The test split is only read to report RMSE after each epoch; it never
    reaches a gradient.
    """
    if (explain is not None) != (config.variant == EXPLAINABLE):
        raise ValueError(f"the {config.variant} model needs an explainability matrix iff it is explainable")
    train_matrix = data.train
    m, n = train_matrix.num_users, train_matrix.num_items
    if config.batch_size > m:
        raise ValueError(f"batch_size {config.batch_size} exceeds the {m} training users")
    if explain is not None and explain.shape != (m, n):
        raise ValueError(f"explainability matrix shape {explain.shape} does not match ratings {(m, n)}")

    explain_dense = explain_rows(explain)
    params = init_params(config, n)
    optimizer = GradientDescent(config.learning_rate, config.momentum)
    everyone = make_batch(train_matrix, np.arange(m), explain_dense)

    rows: List[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(m)
        for start in range(0, m, config.batch_size):
            batch = make_batch(train_matrix, order[start:start + config.batch_size], explain_dense)
            optimizer.step(params, gradients(params, batch, config.lam))
            logger.debug("epoch %d batch %d: %d users", epoch, start // config.batch_size + 1, len(batch))

        train_loss = loss(params, everyone, config.lam)
        if not np.isfinite(train_loss) or not params.is_finite():
            raise TrainingDivergedError(epoch, train_loss)

        if data.num_test:
            test_raw, test_normalized = holdout_rmse(predict(params, everyone.ratings, everyone.explain), data.test)
        else:
            test_raw = test_normalized = float("nan")
        stats = EpochStats(epoch, train_loss, test_raw, test_normalized)
        rows.append(stats)
        logger.info(
            "%s epoch %d/%d: train_loss=%.4f test_rmse=%.4f",
            config.variant, epoch, config.epochs, train_loss, test_raw,
        )
        if progress is not None:
            progress(stats)

    history = pd.DataFrame([asdict(s) for s in rows], columns=HISTORY_COLUMNS)
    return TrainResult(params=params, history=history)


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    config: TrainConfig,
    epochs_trained: int,
    split: Optional[Dict[str, Any]] = None,
) -> None:
    """``split`` identifies the holdout the model was fitted on, so it is never scored on its own training ratings."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "num_items": params.num_items,
        "epochs_trained": epochs_trained,
        "config": asdict(config),
        "split": split,
    }
    with open(path, "wb") as handle:
        np.savez(
            handle,
            header=np.array(json.dumps(header, sort_keys=True)),
            W1=params.W1,
            b=params.b,
            W2=params.W2,
            b_prime=params.b_prime,
        )


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    epochs_trained: int
    split: Optional[Dict[str, Any]] = None


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
        config = TrainConfig(**header["config"])
        params = ModelParams(
            W1=data["W1"],
            b=data["b"],
            W2=data["W2"],
            b_prime=data["b_prime"],
            variant=config.variant,
            input_mode=config.input_mode,
        )
    if params.num_items != header["num_items"] or params.hidden_units != config.hidden_units:
        raise ValueError(f"{path}: weight shapes disagree with the checkpoint header")
    return Checkpoint(params=params, config=config, epochs_trained=header["epochs_trained"], split=header.get("split"))
