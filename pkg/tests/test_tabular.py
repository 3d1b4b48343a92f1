import math

import numpy as np
import pytest

from detrisk import metrics, tabular
from detrisk.tabular import (
    DEMOGRAPHIC_NAMES, FEATURE_NAMES, LAB_NAMES, NUM_FEATURES, VITAL_NAMES,
    PatientHistory, featurize, fit_gbm, fit_logreg, predict_gbm,
    predict_logreg, feature_importance, dump_gbm, load_gbm,
    load_clinical_csv,
)


def walk_tree(tree, x):
    """Pure-python oracle: follow one vector through one tree."""
    node = 0
    while tree.feature[node] >= 0:
        f = tree.feature[node]
        if math.isnan(x[f]):
            go_left = bool(tree.default_left[node])
        else:
            go_left = x[f] < tree.threshold[node]
        node = tree.left[node] if go_left else tree.right[node]
    return tree.value[node]


def oracle_predict(model, x):
    margin = model.base_score
    for tree in model.trees:
        margin += model.learning_rate * walk_tree(tree, x)
    return 1.0 / (1.0 + math.exp(-margin))


def _idx(name):
    return FEATURE_NAMES.index(name)


class TestSchema:
    def test_sizes(self):
        assert len(VITAL_NAMES) == 6
        assert len(DEMOGRAPHIC_NAMES) == 3
        assert len(LAB_NAMES) == 24
        assert NUM_FEATURES == 114
        assert len(set(FEATURE_NAMES)) == NUM_FEATURES

    def test_flag_block_mirrors_value_block(self):
        half = NUM_FEATURES // 2
        for i in range(half):
            assert FEATURE_NAMES[half + i] == FEATURE_NAMES[i] + "_missing"


class TestFeaturize:
    def _history(self):
        h = PatientHistory("p1")
        h.add("heart_rate", 5.0, 88.0)
        h.add("heart_rate", 8.0, 92.0)
        h.add("age", 0.0, 61.0)
        return h

    def test_singleton_lab(self):
        h = self._history()
        h.add("albumin", 6.0, 3.4)
        v = featurize(h, 10.0)
        assert v[_idx("albumin_min")] == 3.4
        assert v[_idx("albumin_max")] == 3.4
        assert v[_idx("albumin_min_missing")] == 0.0

    def test_lab_min_max_scan(self):
        h = self._history()
        for t, val in [(2.0, 3.0), (4.0, 9.0), (6.0, 5.0)]:
            h.add("ldh", t, val)
        v = featurize(h, 10.0)
        assert v[_idx("ldh_min")] == 3.0
        assert v[_idx("ldh_max")] == 9.0

    def test_empty_lab_window_flagged(self):
        v = featurize(self._history(), 10.0)
        assert math.isnan(v[_idx("troponin_min")])
        assert v[_idx("troponin_min_missing")] == 1.0
        assert v[_idx("troponin_max_missing")] == 1.0

    def test_lookback_boundaries(self):
        h = self._history()
        h.add("sodium", 10.0, 140.0)   # exactly at reference: included
        h.add("calcium", -0.0, 8.0)
        h.add("chloride", 11.0, 99.0)  # after reference: excluded
        v = featurize(h, 10.0)
        assert v[_idx("sodium_max")] == 140.0
        # t = 0 is not inside (10 - 12, 10] lower-open window start? 0 > -2: included
        assert v[_idx("calcium_min")] == 8.0
        assert math.isnan(v[_idx("chloride_min")])
        h2 = self._history()
        h2.add("sodium", 2.0, 140.0)   # exactly reference - 12: excluded
        assert math.isnan(featurize(h2, 14.0)[_idx("sodium_min")])
        h2.add("heart_rate", 14.0, 80.0)
        h3 = self._history()
        h3.add("sodium", 2.0001, 140.0)
        assert featurize(h3, 14.0)[_idx("sodium_min")] == 140.0

    def test_vital_latest_at_or_before(self):
        v = featurize(self._history(), 10.0)
        assert v[_idx("heart_rate")] == 92.0
        v = featurize(self._history(), 6.0)
        assert v[_idx("heart_rate")] == 88.0
        v = featurize(self._history(), 5.0)
        assert v[_idx("heart_rate")] == 88.0

    def test_demographics_copied(self):
        v = featurize(self._history(), 10.0)
        assert v[_idx("age")] == 61.0
        assert v[_idx("weight_missing")] == 1.0

    def test_no_vitals_means_fully_missing(self):
        h = PatientHistory("p2")
        h.add("age", 0.0, 50.0)
        h.add("albumin", 5.0, 3.3)
        v = featurize(h, 10.0)
        half = NUM_FEATURES // 2
        assert np.all(np.isnan(v[:half]))
        assert np.all(v[half:] == 1.0)
        h.add("heart_rate", 20.0, 90.0)  # only in the future: still missing
        v = featurize(h, 10.0)
        assert np.all(v[half:] == 1.0)

    def test_missing_never_zero(self):
        v = featurize(self._history(), 10.0)
        half = NUM_FEATURES // 2
        missing = v[half:] == 1.0
        assert np.all(np.isnan(v[:half][missing]))

    def test_unknown_variable_rejected(self):
        with pytest.raises(ValueError):
            PatientHistory("p").add("glucose", 1.0, 5.0)
        with pytest.raises(ValueError):
            PatientHistory("p").add("heart_rate", -1.0, 80.0)
        with pytest.raises(ValueError):
            PatientHistory("p").add("heart_rate", 1.0, math.inf)


class TestClinicalCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "clin.csv"
        path.write_text(
            "patient_id,timestamp_h,variable_name,value\n"
            "p1,12.0,heart_rate,91.5\n"
            "p1,3.5,albumin,3.2\n"
            "p2,12.0,age,47\n"
        )
        hist = load_clinical_csv(path)
        assert set(hist) == {"p1", "p2"}
        assert hist["p1"].latest_at_or_before("heart_rate", 12.0) == 91.5
        assert hist["p1"].window_values("albumin", 0.0, 12.0) == [3.2]

    def test_bad_header(self, tmp_path):
        path = tmp_path / "clin.csv"
        path.write_text("patient,when,what,value\np1,1,heart_rate,80\n")
        with pytest.raises(ValueError):
            load_clinical_csv(path)

    def test_bad_variable_reports_line(self, tmp_path):
        path = tmp_path / "clin.csv"
        path.write_text(
            "patient_id,timestamp_h,variable_name,value\n"
            "p1,1.0,glucose,5.0\n"
        )
        with pytest.raises(ValueError, match="line 2"):
            load_clinical_csv(path)


class TestGbm:
    def test_zero_trees_predicts_class_rate(self):
        x = np.zeros((10, 3))
        y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], dtype=float)
        model = fit_gbm(x, y, num_trees=0)
        assert abs(predict_gbm(model, np.zeros(3)) - 0.3) < 1e-12

    def test_one_dim_perfect_split(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.uniform(-2, -0.1, 30), rng.uniform(0.1, 2, 30)])[:, None]
        y = (x[:, 0] > 0).astype(float)
        model = fit_gbm(x, y, learning_rate=1.0, num_trees=1, max_leaves=2)
        tree = model.trees[0]
        split = tree.threshold[0]
        assert x[x[:, 0] < 0, 0].max() < split < x[x[:, 0] > 0, 0].min()
        pred = predict_gbm(model, x)
        assert np.array_equal((pred > 0.5).astype(float), y)

    def test_train_loss_non_increasing(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 6))
        y = (x[:, 0] + 0.5 * x[:, 1] ** 2 + 0.3 * rng.standard_normal(200) > 0.3).astype(float)
        model = fit_gbm(x, y, learning_rate=0.1, num_trees=60, max_leaves=6)
        losses = np.array(model.train_losses)
        assert np.all(np.diff(losses) <= 1e-12)

    def test_predict_matches_tree_walk_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((150, 8))
        x[rng.random((150, 8)) < 0.15] = np.nan
        y = (np.nan_to_num(x[:, 2]) > 0).astype(float)
        model = fit_gbm(x, y, num_trees=12, max_leaves=6)
        queries = rng.standard_normal((1000, 8))
        queries[rng.random((1000, 8)) < 0.2] = np.nan
        got = predict_gbm(model, queries)
        for i in range(1000):
            assert abs(got[i] - oracle_predict(model, queries[i])) < 1e-12

    def test_missing_routed_to_learned_direction(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (120, 1))
        y = (x[:, 0] > 0.5).astype(float)
        x[:30, 0] = np.nan
        y[:30] = 1.0
        model = fit_gbm(x, y, learning_rate=1.0, num_trees=3, max_leaves=3)
        p_missing = predict_gbm(model, np.array([np.nan]))
        p_low = predict_gbm(model, np.array([0.1]))
        assert p_missing > 0.5 > p_low

    def test_all_missing_vector_is_finite(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((80, 5))
        y = (x[:, 0] > 0).astype(float)
        model = fit_gbm(x, y, num_trees=10, max_leaves=4)
        p = predict_gbm(model, np.full(5, np.nan))
        assert 0.0 < p < 1.0

    def test_single_class_warns_and_returns_prior(self):
        x = np.zeros((5, 2))
        y = np.ones(5)
        model = fit_gbm(x, y, num_trees=10)
        assert model.warning is not None
        assert model.num_trees == 0
        p = predict_gbm(model, np.zeros(2))
        assert 0.5 < p < 1.0

    def test_input_validation(self):
        x = np.zeros((5, 2))
        with pytest.raises(ValueError):
            fit_gbm(x, np.array([0, 1, 2, 0, 1], dtype=float))
        with pytest.raises(ValueError):
            fit_gbm(np.zeros((1, 2)), np.array([1.0]))
        with pytest.raises(ValueError):
            fit_gbm(x, np.array([0, 1, 0, 1, 0], dtype=float), learning_rate=0.0)
        model = fit_gbm(x, np.array([0, 1, 0, 1, 0], dtype=float), num_trees=2)
        with pytest.raises(ValueError):
            predict_gbm(model, np.zeros(3))

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((100, 4))
        y = (x[:, 1] > 0).astype(float)
        a = fit_gbm(x, y, num_trees=8)
        b = fit_gbm(x, y, num_trees=8)
        q = rng.standard_normal((50, 4))
        assert np.array_equal(predict_gbm(a, q), predict_gbm(b, q))


class TestImportance:
    def test_zero_trees(self):
        model = fit_gbm(np.zeros((4, 3)), np.array([0, 1, 0, 1], dtype=float), num_trees=0)
        assert all(c == 0 for _, c in feature_importance(model))

    def test_single_split_counted_once(self):
        x = np.linspace(-1, 1, 40)[:, None]
        y = (x[:, 0] > 0).astype(float)
        model = fit_gbm(x, y, num_trees=1, max_leaves=2)
        imp = feature_importance(model, ["only"])
        assert imp == [("only", 1)]

    def test_counts_sum_to_internal_nodes(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((200, 7))
        y = (x[:, 0] * x[:, 1] > 0).astype(float)
        model = fit_gbm(x, y, num_trees=15, max_leaves=8)
        total = sum(c for _, c in feature_importance(model))
        expect = sum(int((t.feature >= 0).sum()) for t in model.trees)
        assert total == expect

    def test_planted_feature_wins_majority(self):
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((300, 10))
            flip = rng.random(300) < 0.05
            y = ((x[:, 3] > 0) ^ flip).astype(float)
            model = fit_gbm(x, y, num_trees=20, max_leaves=4)
            top = feature_importance(model)[0][0]
            wins += top == "f3"
        assert wins >= 6


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((120, 5))
        x[rng.random((120, 5)) < 0.1] = np.nan
        y = (np.nan_to_num(x[:, 0]) + 0.2 * rng.standard_normal(120) > 0).astype(float)
        model = fit_gbm(x, y, num_trees=9, max_leaves=5)
        path = tmp_path / "model.gbm"
        dump_gbm(model, path)
        again = load_gbm(path)
        q = rng.standard_normal((200, 5))
        q[rng.random((200, 5)) < 0.2] = np.nan
        assert np.array_equal(predict_gbm(model, q), predict_gbm(again, q))

    def test_hand_written_model(self, tmp_path):
        path = tmp_path / "tiny.gbm"
        path.write_text(
            "gbm v1\n"
            "num_features 2\n"
            "learning_rate 0.5\n"
            "base_score 0.0\n"
            "max_leaves 2\n"
            "seed 0\n"
            "trees 1\n"
            "tree 0 nodes 3\n"
            "0,1,2.5,R,1,2,0.0\n"
            "1,-1,nan,L,-1,-1,-2.0\n"
            "2,-1,nan,L,-1,-1,4.0\n"
        )
        model = load_gbm(path)
        # x[1] = 1 < 2.5: left leaf, margin 0.5 * -2 = -1
        assert abs(predict_gbm(model, np.array([0.0, 1.0])) - 1 / (1 + math.exp(1))) < 1e-12
        # x[1] = 3: right leaf, margin 0.5 * 4 = 2
        assert abs(predict_gbm(model, np.array([0.0, 3.0])) - 1 / (1 + math.exp(-2))) < 1e-12
        # x[1] missing: default R, margin 2
        assert abs(predict_gbm(model, np.array([0.0, np.nan])) - 1 / (1 + math.exp(-2))) < 1e-12

    def test_corrupt_dump_rejected(self, tmp_path):
        path = tmp_path / "bad.gbm"
        path.write_text("not a model\n")
        with pytest.raises(ValueError):
            load_gbm(path)


class TestLogreg:
    def test_separable_reaches_full_accuracy(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.uniform(-2, -0.2, 40), rng.uniform(0.2, 2, 40)])[:, None]
        y = (x[:, 0] > 0).astype(float)
        model = fit_logreg(x, y, iterations=2000)
        pred = predict_logreg(model, x)
        assert np.array_equal((pred > 0.5).astype(float), y)

    def test_zero_iterations_prior_only(self):
        x = np.random.default_rng(1).standard_normal((10, 3))
        y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], dtype=float)
        model = fit_logreg(x, y, iterations=0)
        assert np.allclose(predict_logreg(model, x), 0.3)

    def test_predictions_in_open_interval(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((60, 4)) * 50
        y = (x[:, 0] > 0).astype(float)
        model = fit_logreg(x, y, iterations=300)
        p = predict_logreg(model, x)
        assert np.all((p > 0.0) & (p < 1.0))

    def test_missing_values_imputed(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((100, 3))
        x[rng.random((100, 3)) < 0.2] = np.nan
        y = (np.nan_to_num(x[:, 0]) > 0).astype(float)
        model = fit_logreg(x, y, iterations=200)
        p = predict_logreg(model, np.full(3, np.nan))
        assert 0.0 < p < 1.0

    def test_single_class_prior(self):
        model = fit_logreg(np.zeros((4, 2)), np.zeros(4))
        assert model.warning is not None
        assert predict_logreg(model, np.zeros(2)) < 0.5

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((50, 4))
        y = (x[:, 1] > 0).astype(float)
        model = fit_logreg(x, y, iterations=100)
        path = tmp_path / "m.json"
        tabular.dump_logreg(model, path)
        back = tabular.load_logreg(path)
        assert np.array_equal(
            predict_logreg(model, x), predict_logreg(back, x))

    def test_load_rejects_other_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{\"format\": \"other\"}\n")
        with pytest.raises(ValueError):
            tabular.load_logreg(path)


class TestGbmVsBaseline:
    def test_gbm_not_worse_than_logreg(self):
        rng = np.random.default_rng(30)
        n = 600
        x = rng.standard_normal((n, 6))
        logit = 1.2 * x[:, 0] - 0.8 * x[:, 1] + 1.5 * (x[:, 2] * x[:, 3] > 0) + 0.3 * rng.standard_normal(n)
        y = (logit > 0.4).astype(float)
        xtr, xte = x[:300], x[300:]
        ytr, yte = y[:300], y[300:]
        gbm = fit_gbm(xtr, ytr, num_trees=150, max_leaves=6)
        lr = fit_logreg(xtr, ytr, iterations=800)
        auc_gbm = metrics.roc_auc(predict_gbm(gbm, xte), yte)
        auc_lr = metrics.roc_auc(predict_logreg(lr, xte), yte)
        assert auc_gbm >= auc_lr - 0.02
