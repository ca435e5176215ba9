"""Experiment driver: data preparation, training, evaluation, parameter
sweeps and per-recommendation explanations, with plot-ready CSV output."""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

import autorec
from autorec import BASELINE, EXPLAINABLE, VARIANTS, CsvProgressSink, ModelParams, TrainConfig, TrainResult
from metrics import evaluate, evaluated_users, global_mean_rmse, map_at_n, mep_at_n, recommend
from neighborhood import ExplainabilityMatrix, build_explainability_matrix, find_neighbors, neighbor_histogram
from ratings import (
    RATING_SCALE,
    DataSplit,
    RatingFileError,
    RatingMatrix,
    check_min_ratings,
    parse_movielens,
    split,
    write_split_manifest,
)

logger = logging.getLogger(__name__)

SWEEP_AXES = ("epochs", "n_top", "hidden_units", "neighborhood_size", "theta")

DEFAULT_AXIS_VALUES = {
    "n_top": [5, 10, 20, 50],
    "hidden_units": [50, 100, 200, 300, 500],
    "neighborhood_size": [10, 25, 50, 100],
    "theta": [0.0, 1.0, 2.0, 3.0, 4.0],
}

FIGURE_FILES = {
    "epochs": "fig3_rmse_vs_epochs.csv",
    "n_top": "fig4_topn.csv",
    "hidden_units": "fig5_hidden.csv",
    "neighborhood_size": "fig6_neighbors_theta.csv",
    "theta": "fig6_neighbors_theta.csv",
}

CONTEXT_COLUMNS = [
    "hidden_units", "neighborhood_size", "theta", "n_top", "lam", "learning_rate",
    "batch_size", "epochs", "seed", "split_seed", "test_fraction", "input_mode",
]

FLOAT_FORMAT = "%.6f"


@dataclass
class ExperimentSpec:
    """Everything one run needs; field names double as the experiment-file keys."""

    data: str = "data/ml-100k/u.data"
    csv: bool = False
    test_fraction: float = 0.1
    split_seed: int = 0
    per_user_split: bool = False
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    sweep: str = "epochs"
    values: Optional[List[float]] = None
    hidden_units: int = 300
    lam: float = 0.01
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    theta: float = 0.0
    neighborhood_size: int = 50
    n_top: int = 10
    relevance_threshold: int = 4
    input_mode: str = autorec.CONCAT
    momentum: float = 0.0
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        if self.sweep not in SWEEP_AXES + ("all",):
            raise ValueError(f"sweep must be one of {SWEEP_AXES + ('all',)}, got {self.sweep!r}")
        unknown = set(self.variants) - set(VARIANTS)
        if not self.variants or unknown:
            raise ValueError(f"variants must be a nonempty subset of {VARIANTS}, got {self.variants}")
        if self.values is not None:
            if not self.values:
                raise ValueError("axis values must not be empty")
            if any(b <= a for a, b in zip(self.values, self.values[1:])):
                raise ValueError(f"axis values must be strictly increasing, got {self.values}")
            if self.sweep == "all":
                raise ValueError("axis values need a single sweep axis, not 'all'")
        # fail fast on bad training parameters
        self.train_config(BASELINE)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def axis_values(self, axis: str) -> List[Any]:
        if self.values is not None and self.sweep == axis:
            values = self.values
        elif axis == "epochs":
            values = list(range(1, self.epochs + 1))
        else:
            values = DEFAULT_AXIS_VALUES[axis]
        return [float(v) for v in values] if axis == "theta" else [int(v) for v in values]

    def train_config(self, variant: str, **overrides) -> TrainConfig:
        settings = dict(
            hidden_units=self.hidden_units,
            lam=self.lam,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            variant=variant,
            theta=self.theta,
            neighborhood_size=self.neighborhood_size,
            input_mode=self.input_mode,
            momentum=self.momentum,
        )
        settings.update(overrides)
        return TrainConfig(**settings)

    def split_identity(self) -> Dict[str, Any]:
        """What fixes the holdout: the rating file and the split settings."""
        return {
            "data": str(Path(self.data).resolve()),
            "csv": bool(self.csv),
            "split_seed": int(self.split_seed),
            "test_fraction": float(self.test_fraction),
            "per_user_split": bool(self.per_user_split),
        }

    def context(self, **overrides) -> Dict[str, Any]:
        values = {name: getattr(self, name) for name in CONTEXT_COLUMNS}
        values.update(overrides)
        return values


def load_experiment_spec(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentSpec:
    """Read a JSON experiment file and apply non-None overrides on top."""
    settings: Dict[str, Any] = {}
    if path:
        with open(path) as handle:
            settings = json.load(handle)
        if not isinstance(settings, dict):
            raise ValueError(f"{path}: experiment file must hold a JSON object")
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = set(settings) - known
    if unknown:
        raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentSpec(**settings)


def prepare_data(spec: ExperimentSpec) -> DataSplit:
    ratings = parse_movielens(spec.data, csv=spec.csv)
    if not ratings:
        raise RatingFileError(f"no ratings in {spec.data}")
    check_min_ratings(ratings)
    return split(ratings, spec.test_fraction, spec.split_seed, per_user=spec.per_user_split)


def explainability_for(spec: ExperimentSpec, train: RatingMatrix, size: int, theta: float) -> ExplainabilityMatrix:
    """Explainability matrix for (size, theta), reusing a cached CSV when its header matches."""
    cache_dir = spec.out_path / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    split_tag = f"{spec.split_seed}-{spec.test_fraction:g}{'u' if spec.per_user_split else ''}"
    path = cache_dir / f"explainability_{Path(spec.data).stem}_split{split_tag}_n{size}_theta{theta:g}.csv"
    if path.exists():
        try:
            cached = ExplainabilityMatrix.load_csv(path, train.user_ids, train.item_ids)
        except (ValueError, KeyError) as exc:
            logger.warning("Ignoring unreadable cache %s: %s", path, exc)
        else:
            if cached.matches(size, theta):
                logger.info("Loaded cached explainability matrix %s", path)
                return cached
    explain = build_explainability_matrix(train, size, theta, workers=spec.workers)
    explain.save_csv(path, train.user_ids, train.item_ids)
    return explain


def fit(spec: ExperimentSpec, data: DataSplit, variant: str, explain: ExplainabilityMatrix, progress=None, **overrides) -> TrainResult:
    config = spec.train_config(variant, **overrides)
    return autorec.train(data, explain if variant == EXPLAINABLE else None, config, progress)


def _predictions(result: TrainResult, data: DataSplit, explain: ExplainabilityMatrix) -> np.ndarray:
    params = result.params
    return autorec.predict_matrix(params, data.train, explain if params.variant == EXPLAINABLE else None)


def _ranking_metrics(spec: ExperimentSpec, predictions, data: DataSplit, explain: ExplainabilityMatrix, n_top: int) -> Dict[str, float]:
    lists = recommend(predictions, data.train, evaluated_users(data.test), n_top)
    return {
        "map": map_at_n(lists, data.test, n_top, spec.relevance_threshold),
        "mep": mep_at_n(lists, explain, n_top),
    }


def run_epoch_curve(spec: ExperimentSpec, data: DataSplit) -> pd.DataFrame:
    """Test RMSE after every epoch for each variant, trained once."""
    epochs = spec.axis_values("epochs")
    explain = None
    if EXPLAINABLE in spec.variants:
        explain = explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
    rows = []
    for variant in spec.variants:
        result = fit(spec, data, variant, explain, epochs=max(epochs))
        history = result.history.set_index("epoch")
        for epoch in epochs:
            rows.append({
                "epoch": epoch,
                "variant": variant,
                "test_rmse": history.at[epoch, "test_rmse"],
                "test_rmse_normalized": history.at[epoch, "test_rmse_normalized"],
                "train_loss": history.at[epoch, "train_loss"],
                **spec.context(epochs=max(epochs)),
            })
    return _ordered(pd.DataFrame(rows), "epoch", spec.variants)


def run_topn_sweep(spec: ExperimentSpec, data: DataSplit) -> pd.DataFrame:
    """MAP and MEP at each list size, one trained model per variant."""
    explain = explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
    rows = []
    for variant in spec.variants:
        predictions = _predictions(fit(spec, data, variant, explain), data, explain)
        for n_top in spec.axis_values("n_top"):
            rows.append({
                "n_top": n_top,
                "variant": variant,
                **_ranking_metrics(spec, predictions, data, explain, n_top),
                **spec.context(n_top=n_top),
            })
    return _ordered(pd.DataFrame(rows), "n_top", spec.variants)


def run_hidden_units_sweep(spec: ExperimentSpec, data: DataSplit) -> pd.DataFrame:
    explain = explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
    rows = []
    for index, k in enumerate(spec.axis_values("hidden_units")):
        for variant in spec.variants:
            result = fit(spec, data, variant, explain, hidden_units=k, seed=spec.seed + index)
            rows.append({
                "hidden_units": k,
                "variant": variant,
                **_ranking_metrics(spec, _predictions(result, data, explain), data, explain, spec.n_top),
                "test_rmse": result.history["test_rmse"].iloc[-1],
                **spec.context(hidden_units=k, seed=spec.seed + index),
            })
    return _ordered(pd.DataFrame(rows), "hidden_units", spec.variants)


def _explainability_sweep(spec: ExperimentSpec, data: DataSplit, axis: str) -> pd.DataFrame:
    # The baseline never sees E, so it is trained once and only its MEP moves with E.
    baseline = None
    if BASELINE in spec.variants:
        default_explain = explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
        baseline = _predictions(fit(spec, data, BASELINE, default_explain), data, default_explain)

    rows = []
    for index, value in enumerate(spec.axis_values(axis)):
        size = value if axis == "neighborhood_size" else spec.neighborhood_size
        theta = value if axis == "theta" else spec.theta
        explain = explainability_for(spec, data.train, size, theta)
        for variant in spec.variants:
            if variant == BASELINE:
                predictions, seed = baseline, spec.seed
            else:
                seed = spec.seed + index
                result = fit(spec, data, variant, explain, seed=seed, neighborhood_size=size, theta=theta)
                predictions = _predictions(result, data, explain)
            rows.append({
                "axis": axis,
                "value": float(value),
                "variant": variant,
                **_ranking_metrics(spec, predictions, data, explain, spec.n_top),
                "explainable_entries": explain.nonzero_count(),
                **spec.context(neighborhood_size=size, theta=theta, seed=seed),
            })
    return _ordered(pd.DataFrame(rows), "value", spec.variants)


def run_neighborhood_sweep(spec: ExperimentSpec, data: DataSplit) -> pd.DataFrame:
    return _explainability_sweep(spec, data, "neighborhood_size")


def run_theta_sweep(spec: ExperimentSpec, data: DataSplit) -> pd.DataFrame:
    return _explainability_sweep(spec, data, "theta")


SWEEPS = {
    "epochs": run_epoch_curve,
    "n_top": run_topn_sweep,
    "hidden_units": run_hidden_units_sweep,
    "neighborhood_size": run_neighborhood_sweep,
    "theta": run_theta_sweep,
}


def _ordered(frame: pd.DataFrame, key: str, variants: List[str]) -> pd.DataFrame:
    rank = frame["variant"].map({v: i for i, v in enumerate(variants)})
    frame = frame.assign(_rank=rank).sort_values([key, "_rank"], kind="mergesort")
    return frame.drop(columns="_rank").reset_index(drop=True)


def write_sweep(spec: ExperimentSpec, axis: str, frame: pd.DataFrame) -> Path:
    """Write one figure's CSV; the two explainability axes share a file."""
    spec.out_path.mkdir(parents=True, exist_ok=True)
    path = spec.out_path / FIGURE_FILES[axis]
    if axis in ("neighborhood_size", "theta") and path.exists():
        existing = pd.read_csv(path)
        frame = pd.concat([existing[existing["axis"] != axis], frame], ignore_index=True)
        frame["_axis"] = frame["axis"].map({"neighborhood_size": 0, "theta": 1})
        frame = frame.sort_values("_axis", kind="mergesort").drop(columns="_axis")
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def run_sweep(spec: ExperimentSpec, data: DataSplit) -> List[Path]:
    axes = SWEEP_AXES if spec.sweep == "all" else (spec.sweep,)
    return [write_sweep(spec, axis, SWEEPS[axis](spec, data)) for axis in axes]


@dataclass(frozen=True)
class TrainedState:
    params: ModelParams
    train: RatingMatrix
    explain: ExplainabilityMatrix


@dataclass(frozen=True)
class Explanation:
    user_id: int
    item_id: int
    predicted_rating: float
    explainability_score: float
    explainable: bool
    neighborhood_size: int
    neighbors_who_rated: int
    histogram: Dict[int, int]

    def as_dict(self) -> Dict[str, Any]:
        record = asdict(self)
        record["histogram"] = {str(x): count for x, count in self.histogram.items()}
        return record


def explain_recommendation(user_id: int, item_id: int, state: TrainedState) -> Explanation:
    """Why item i is (or is not) backed by user u's neighborhood, with the model's prediction."""
    u = state.train.user_index(user_id)
    i = state.train.item_index(item_id)
    neighbors = find_neighbors(state.train, u, state.explain.neighborhood_size)
    histogram = neighbor_histogram(state.train, neighbors, i)

    e_row = state.explain.row(u) if state.params.variant == EXPLAINABLE else None
    predicted = autorec.predict(state.params, state.train.dense[u], e_row)[i]
    score = float(state.explain.row(u)[i])
    return Explanation(
        user_id=user_id,
        item_id=item_id,
        predicted_rating=float(np.clip(predicted * RATING_SCALE, 1, RATING_SCALE)),
        explainability_score=score,
        explainable=score > 0,
        neighborhood_size=len(neighbors),
        neighbors_who_rated=sum(histogram.values()),
        histogram=histogram,
    )


def _model_path(spec: ExperimentSpec, variant: str) -> Path:
    return spec.out_path / f"model_{variant}.npz"


def _load_state(spec: ExperimentSpec, data: DataSplit, variant: str) -> TrainedState:
    path = _model_path(spec, variant)
    if not path.exists():
        raise FileNotFoundError(f"no trained {variant} model at {path}; run `train` first")
    checkpoint = autorec.load_checkpoint(path)
    if checkpoint.split != spec.split_identity():
        raise ValueError(
            f"{path} was trained on split {checkpoint.split}, not {spec.split_identity()}; retrain or match the split settings"
        )
    config = checkpoint.config
    explain = explainability_for(spec, data.train, config.neighborhood_size, config.theta)
    return TrainedState(params=checkpoint.params, train=data.train, explain=explain)


def cmd_prepare(spec: ExperimentSpec, args) -> None:
    data = prepare_data(spec)
    spec.out_path.mkdir(parents=True, exist_ok=True)
    manifest = spec.out_path / "split_manifest.csv"
    write_split_manifest(data, manifest)
    explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
    print(f"Saved split manifest ({data.train.nnz} train / {data.num_test} test) to {manifest}")


def cmd_train(spec: ExperimentSpec, args) -> None:
    data = prepare_data(spec)
    spec.out_path.mkdir(parents=True, exist_ok=True)
    explain = explainability_for(spec, data.train, spec.neighborhood_size, spec.theta)
    for variant in spec.variants:
        sink = CsvProgressSink(spec.out_path / f"history_{variant}.csv")
        result = fit(spec, data, variant, explain, progress=sink)
        autorec.save_checkpoint(_model_path(spec, variant), result.params, spec.train_config(variant), spec.epochs, split=spec.split_identity())
        print(f"Saved {variant} model to {_model_path(spec, variant)} (final test RMSE {result.history['test_rmse'].iloc[-1]:.4f})")


def cmd_evaluate(spec: ExperimentSpec, args) -> None:
    data = prepare_data(spec)
    rows = []
    for variant in spec.variants:
        state = _load_state(spec, data, variant)
        predictions = autorec.predict_matrix(
            state.params, data.train, state.explain if variant == EXPLAINABLE else None
        )
        report = evaluate(
            predictions, data.train, data.test, state.explain, spec.n_top,
            variant, state.params.hidden_units, spec.relevance_threshold,
        )
        rows.append(report.as_row())
    frame = pd.DataFrame(rows)
    frame["global_mean_rmse"] = global_mean_rmse(data.train, data.test)
    path = spec.out_path / "evaluation.csv"
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    print(f"Saved {len(frame)} rows to {path}")
    print()
    print(frame.to_string(index=False))


def cmd_sweep(spec: ExperimentSpec, args) -> None:
    data = prepare_data(spec)
    for path in run_sweep(spec, data):
        print(f"Saved {path}")


def cmd_explain(spec: ExperimentSpec, args) -> None:
    data = prepare_data(spec)
    variant = spec.variants[-1]
    state = _load_state(spec, data, variant)
    record = explain_recommendation(args.user, args.item, state)
    print(json.dumps(record.as_dict(), indent=2))


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "explain": cmd_explain,
}


def _parse_values(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train and evaluate AutoRec and explainable AutoRec on MovieLens ratings."
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run.")
    parser.add_argument("--data", help="Path to a MovieLens u.data rating file.")
    parser.add_argument("--csv", action="store_true", default=None, help="Rating file is comma separated with a header row.")
    parser.add_argument("--spec", help="JSON experiment file; flags override its values.")
    parser.add_argument("--out-dir", dest="out_dir", help="Directory for models, caches and CSV reports.")
    parser.add_argument("--seed", type=int, help="Model initialization and shuffling seed.")
    parser.add_argument("--variant", choices=VARIANTS, help="Run a single model variant.")
    parser.add_argument("--sweep", choices=SWEEP_AXES + ("all",), help="Parameter to sweep.")
    parser.add_argument("--values", help="Comma separated axis values, e.g. 5,10,20,50.")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--hidden-units", dest="hidden_units", type=int)
    parser.add_argument("--theta", type=float)
    parser.add_argument("--neighborhood-size", dest="neighborhood_size", type=int)
    parser.add_argument("--n-top", dest="n_top", type=int)
    parser.add_argument("--workers", type=int, help="Threads used to build the explainability matrix.")
    parser.add_argument("--user", type=int, help="External user id (explain).")
    parser.add_argument("--item", type=int, help="External item id (explain).")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default INFO).")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "explain" and (args.user is None or args.item is None):
        parser.error("explain needs --user and --item")

    overrides = {
        name: getattr(args, name)
        for name in ("data", "csv", "out_dir", "seed", "sweep", "epochs", "hidden_units",
                     "theta", "neighborhood_size", "n_top", "workers")
    }
    overrides["variants"] = [args.variant] if args.variant else None
    overrides["values"] = _parse_values(args.values)

    try:
        spec = load_experiment_spec(args.spec, overrides)
        COMMANDS[args.command](spec, args)
    except autorec.TrainingDivergedError as exc:
        logger.error("%s", exc)
        return 2
    except (RatingFileError, FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
