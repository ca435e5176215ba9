import json

import numpy as np
import pandas as pd
import pytest

from autorec import EXPLAINABLE, TrainConfig, init_params
from conftest import toy_matrix
from experiments import (
    FIGURE_FILES,
    ExperimentSpec,
    TrainedState,
    explain_recommendation,
    explainability_for,
    fit,
    load_experiment_spec,
    main,
    prepare_data,
    run_epoch_curve,
    run_hidden_units_sweep,
    run_sweep,
    run_theta_sweep,
    run_topn_sweep,
)
from neighborhood import build_explainability_matrix


@pytest.fixture
def small_spec(tmp_path, rating_file):
    return ExperimentSpec(
        data=str(rating_file),
        out_dir=str(tmp_path / "out"),
        hidden_units=4,
        epochs=3,
        batch_size=4,
        neighborhood_size=5,
        n_top=3,
    )


@pytest.fixture
def spec_file(tmp_path, rating_file):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({
        "data": str(rating_file),
        "out_dir": str(tmp_path / "cli"),
        "hidden_units": 4,
        "epochs": 2,
        "batch_size": 4,
        "neighborhood_size": 5,
        "n_top": 3,
    }))
    return path


class TestExperimentSpec:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"epochs": 5, "variants": ["baseline"], "theta": 2}))
        spec = load_experiment_spec(str(path), {"epochs": 7, "seed": None})
        assert spec.epochs == 7
        assert spec.seed == 0
        assert spec.variants == ["baseline"]
        assert spec.train_config("baseline").theta == 2

    def test_defaults(self):
        spec = load_experiment_spec()
        assert spec.hidden_units == 300 and spec.test_fraction == 0.1
        assert spec.variants == ["baseline", "explainable"]

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"hiden_units": 5}))
        with pytest.raises(ValueError, match="hiden_units"):
            load_experiment_spec(str(path))

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "experiment.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError):
            load_experiment_spec(str(path))

    @pytest.mark.parametrize(
        "settings",
        [
            {"values": [10, 5]},
            {"values": [5, 5]},
            {"values": []},
            {"sweep": "learning_rate"},
            {"variants": ["deep"]},
            {"variants": []},
            {"hidden_units": 0},
            {"sweep": "all", "values": [1, 2]},
        ],
    )
    def test_rejects(self, settings):
        with pytest.raises(ValueError):
            ExperimentSpec(**settings)

    def test_axis_values(self):
        spec = ExperimentSpec(sweep="n_top", values=[2, 4], epochs=3)
        assert spec.axis_values("n_top") == [2, 4]
        assert spec.axis_values("hidden_units") == [50, 100, 200, 300, 500]
        assert spec.axis_values("theta") == [0.0, 1.0, 2.0, 3.0, 4.0]
        assert spec.axis_values("epochs") == [1, 2, 3]


class TestExplainabilityCache:
    def test_built_from_training_split(self, small_spec):
        data = prepare_data(small_spec)
        explain = explainability_for(small_spec, data.train, 5, 1.0)
        expected = build_explainability_matrix(data.train, 5, 1.0)
        np.testing.assert_array_equal(explain.to_dense(), expected.to_dense())
        assert list((small_spec.out_path / "cache").glob("*.csv"))

    def test_reused_when_present(self, small_spec, caplog):
        data = prepare_data(small_spec)
        first = explainability_for(small_spec, data.train, 5, 0.0)
        with caplog.at_level("INFO"):
            second = explainability_for(small_spec, data.train, 5, 0.0)
        assert "Loaded cached" in caplog.text
        np.testing.assert_array_equal(first.to_dense(), second.to_dense())

    def test_cached_matrix_trains_identical_model(self, small_spec):
        data = prepare_data(small_spec)
        fresh = explainability_for(small_spec, data.train, 5, 0.0)
        cached = explainability_for(small_spec, data.train, 5, 0.0)
        from_fresh = fit(small_spec, data, EXPLAINABLE, fresh)
        from_cache = fit(small_spec, data, EXPLAINABLE, cached)
        for name in ("W1", "b", "W2", "b_prime"):
            np.testing.assert_array_equal(getattr(from_cache.params, name), getattr(from_fresh.params, name))

    def test_unreadable_cache_rebuilt(self, small_spec, caplog):
        data = prepare_data(small_spec)
        explainability_for(small_spec, data.train, 5, 0.0)
        (cached,) = (small_spec.out_path / "cache").glob("*.csv")
        cached.write_text("garbage\n")
        with caplog.at_level("WARNING"):
            explain = explainability_for(small_spec, data.train, 5, 0.0)
        assert "Ignoring unreadable cache" in caplog.text
        assert explain.matches(5, 0.0)


class TestSweeps:
    def test_epoch_curve(self, small_spec):
        frame = run_epoch_curve(small_spec, prepare_data(small_spec))
        assert len(frame) == 2 * small_spec.epochs
        assert frame["epoch"].tolist() == [1, 1, 2, 2, 3, 3]
        assert frame["variant"].tolist() == ["baseline", "explainable"] * 3
        assert (frame["test_rmse"] > 0).all()

    def test_epoch_curve_baseline_only(self, small_spec):
        small_spec.variants = ["baseline"]
        frame = run_epoch_curve(small_spec, prepare_data(small_spec))
        assert frame["variant"].unique().tolist() == ["baseline"]
        assert not (small_spec.out_path / "cache").exists()

    def test_topn(self, small_spec):
        small_spec.sweep, small_spec.values = "n_top", [2, 4]
        frame = run_topn_sweep(small_spec, prepare_data(small_spec))
        assert frame["n_top"].tolist() == [2, 2, 4, 4]
        assert frame["map"].between(0, 1).all() and frame["mep"].between(0, 1).all()

    def test_hidden_units(self, small_spec):
        small_spec.sweep, small_spec.values = "hidden_units", [2, 3]
        frame = run_hidden_units_sweep(small_spec, prepare_data(small_spec))
        assert frame["hidden_units"].tolist() == [2, 2, 3, 3]
        assert frame["seed"].tolist() == [0, 0, 1, 1]

    def test_theta(self, small_spec):
        frame = run_theta_sweep(small_spec, prepare_data(small_spec))
        assert len(frame) == 10
        assert frame["value"].tolist() == [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        baseline = frame[frame["variant"] == "baseline"]
        # the baseline keeps its predictions, so only the explainable set shrinks
        assert baseline["mep"].is_monotonic_decreasing
        assert baseline["explainable_entries"].is_monotonic_decreasing

    def test_explainability_axes_share_a_file(self, small_spec):
        data = prepare_data(small_spec)
        small_spec.variants = ["baseline"]
        small_spec.sweep = "theta"
        small_spec.values = [0, 2]
        run_sweep(small_spec, data)
        small_spec.sweep = "neighborhood_size"
        small_spec.values = [3, 6]
        (path,) = run_sweep(small_spec, data)
        assert path.name == FIGURE_FILES["theta"]
        frame = pd.read_csv(path)
        assert frame["axis"].tolist() == ["neighborhood_size"] * 2 + ["theta"] * 2

    def test_rerun_is_byte_identical(self, small_spec, tmp_path):
        small_spec.sweep, small_spec.values = "n_top", [2, 4]
        data = prepare_data(small_spec)
        (path,) = run_sweep(small_spec, data)
        first = path.read_bytes()
        # second run reads the cached explainability matrix
        run_sweep(small_spec, data)
        assert path.read_bytes() == first

        small_spec.out_dir = str(tmp_path / "fresh")
        (fresh,) = run_sweep(small_spec, prepare_data(small_spec))
        assert fresh.read_bytes() == first


class TestExplainRecommendation:
    @pytest.fixture
    def state(self):
        # users 2-4 all rated item 1 with a 5; user 1 has not rated it
        raw = np.array([[0, 4, 2], [5, 4, 0], [5, 3, 1], [5, 0, 2]])
        train = toy_matrix(raw)
        params = init_params(TrainConfig(hidden_units=2, variant=EXPLAINABLE), 3, seed=0)
        return TrainedState(params=params, train=train, explain=build_explainability_matrix(train, 50, 0))

    def test_unanimous_neighbors(self, state):
        record = explain_recommendation(1, 1, state)
        assert record.histogram == {5: 3}
        assert record.neighbors_who_rated == 3 == record.neighborhood_size
        assert record.explainability_score == 1.0
        assert record.explainable
        assert 1 <= record.predicted_rating <= 5
        assert record.as_dict()["histogram"] == {"5": 3}

    @pytest.mark.parametrize("user_id, item_id", [(9, 1), (1, 9)])
    def test_unknown_ids(self, state, user_id, item_id):
        with pytest.raises(ValueError):
            explain_recommendation(user_id, item_id, state)


class TestMain:
    def test_full_pipeline(self, spec_file, tmp_path, rating_file, capsys):
        out = tmp_path / "cli"
        assert main(["prepare", "--spec", str(spec_file)]) == 0
        assert (out / "split_manifest.csv").exists()

        assert main(["train", "--spec", str(spec_file)]) == 0
        for variant in ("baseline", "explainable"):
            assert (out / f"model_{variant}.npz").exists()
            assert len(pd.read_csv(out / f"history_{variant}.csv")) == 2

        assert main(["evaluate", "--spec", str(spec_file)]) == 0
        evaluation = pd.read_csv(out / "evaluation.csv")
        assert evaluation["variant"].tolist() == ["baseline", "explainable"]
        assert "global_mean_rmse" in evaluation.columns

        user, item = (int(v) for v in rating_file.read_text().split()[:2])
        capsys.readouterr()
        assert main(["explain", "--spec", str(spec_file), "--user", str(user), "--item", str(item)]) == 0
        record = json.loads(capsys.readouterr().out)
        assert record["user_id"] == user and record["item_id"] == item

    def test_flags_override_experiment_file(self, spec_file, tmp_path):
        assert main(["train", "--spec", str(spec_file), "--variant", "baseline", "--epochs", "1"]) == 0
        assert len(pd.read_csv(tmp_path / "cli" / "history_baseline.csv")) == 1
        assert not (tmp_path / "cli" / "model_explainable.npz").exists()

    def test_sweep_command(self, spec_file, tmp_path):
        assert main(["sweep", "--spec", str(spec_file), "--sweep", "n_top", "--values", "2,4"]) == 0
        assert (tmp_path / "cli" / FIGURE_FILES["n_top"]).exists()

    def test_missing_data_file(self, tmp_path):
        assert main(["prepare", "--data", str(tmp_path / "absent.data"), "--out-dir", str(tmp_path)]) == 1

    def test_malformed_data_file(self, tmp_path):
        path = tmp_path / "u.data"
        path.write_text("1\t1\t7\t0\n")
        assert main(["prepare", "--data", str(path), "--out-dir", str(tmp_path)]) == 1

    def test_evaluate_before_train(self, spec_file):
        assert main(["evaluate", "--spec", str(spec_file)]) == 1

    @pytest.mark.parametrize("change", [{"split_seed": 1}, {"test_fraction": 0.2}, {"per_user_split": True}])
    def test_evaluate_on_another_split(self, spec_file, tmp_path, change, caplog):
        assert main(["train", "--spec", str(spec_file), "--variant", "baseline"]) == 0
        settings = json.loads(spec_file.read_text())
        settings.update(change)
        spec_file.write_text(json.dumps(settings))
        assert main(["evaluate", "--spec", str(spec_file), "--variant", "baseline"]) == 1
        assert "was trained on split" in caplog.text
        assert not (tmp_path / "cli" / "evaluation.csv").exists()

    def test_explain_on_another_split(self, spec_file, caplog):
        assert main(["train", "--spec", str(spec_file), "--variant", "explainable"]) == 0
        settings = json.loads(spec_file.read_text())
        settings["split_seed"] = 7
        spec_file.write_text(json.dumps(settings))
        assert main(["explain", "--spec", str(spec_file), "--variant", "explainable", "--user", "1", "--item", "1"]) == 1
        assert "was trained on split" in caplog.text

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, spec_file):
        settings = json.loads(spec_file.read_text())
        settings.update(learning_rate=1e10, lam=0, batch_size=1, epochs=50, variants=["baseline"])
        spec_file.write_text(json.dumps(settings))
        assert main(["train", "--spec", str(spec_file)]) == 2

    def test_explain_needs_ids(self, spec_file):
        with pytest.raises(SystemExit):
            main(["explain", "--spec", str(spec_file)])
