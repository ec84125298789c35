"""Classifiers: kNN, SMO-trained SVM, grid search, evaluation, persistence."""

import numpy as np
import pytest

from padvision import core, learn


def make_blobs(rng, centers, n_per, scale=0.5):
    xs, ys = [], []
    for label, c in enumerate(centers):
        xs.append(np.asarray(c) + rng.normal(0, scale, (n_per, len(c))))
        ys.append(np.full(n_per, label))
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64)


class TestStandardize:
    def test_zero_mean_unit_std(self, rng):
        x = rng.normal(3.0, 5.0, (200, 4))
        mean, std = learn.standardize_fit(x)
        z = learn.standardize_apply(x, mean, std)
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)

    def test_constant_dimension_floored(self, rng):
        x = np.column_stack([rng.normal(size=50), np.full(50, 7.0)])
        mean, std = learn.standardize_fit(x)
        assert std[1] == 1.0
        z = learn.standardize_apply(x, mean, std)
        assert np.allclose(z[:, 1], 0.0)


class TestRbfKernel:
    def test_self_similarity_is_one(self, rng):
        x = rng.normal(size=(10, 3))
        k = learn.rbf_kernel(x, x, gamma=0.7)
        assert np.allclose(np.diag(k), 1.0)

    def test_known_value(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        k = learn.rbf_kernel(a, b, gamma=0.1)
        assert k[0, 0] == pytest.approx(np.exp(-0.1 * 25.0))

    def test_symmetry(self, rng):
        x = rng.normal(size=(20, 4))
        k = learn.rbf_kernel(x, x, gamma=0.3)
        assert np.allclose(k, k.T)


class TestKfold:
    def test_stratified_and_balanced(self, rng):
        labels = np.repeat(np.arange(26), 30)
        folds = learn.kfold_split(labels, 3, seed=0)
        for cls in range(26):
            counts = np.bincount(folds[labels == cls], minlength=3)
            assert counts.max() - counts.min() <= 1
        # 520 training / 260 held out per fold at 30 images per class
        for f in range(3):
            assert (folds != f).sum() == 520
            assert (folds == f).sum() == 260

    def test_deterministic(self):
        labels = np.repeat(np.arange(5), 9)
        a = learn.kfold_split(labels, 3, seed=7)
        b = learn.kfold_split(labels, 3, seed=7)
        assert np.array_equal(a, b)


class TestKnn:
    def test_matches_brute_force_oracle(self, rng):
        train = rng.normal(size=(200, 6))
        y = rng.integers(0, 8, 200)
        test = rng.normal(size=(100, 6))
        pred, conf = learn.knn_predict(train, y, test, 8)
        for i in range(100):
            d = ((train - test[i]) ** 2).sum(axis=1)
            assert pred[i] == y[d.argmin()]
            assert conf[i, pred[i]] == 1.0
            assert conf[i].sum() == 1.0

    def test_tie_goes_to_lowest_index(self):
        train = np.array([[1.0, 0.0], [-1.0, 0.0]])
        y = np.array([1, 0])
        pred, _ = learn.knn_predict(train, y, np.array([[0.0, 0.0]]), 2)
        assert pred[0] == 1          # index 0 wins the distance tie


class TestSmo:
    def test_kkt_conditions_on_random_problems(self, rng):
        for trial in range(20):
            n = int(rng.integers(10, 40))
            x = rng.normal(size=(n, 3))
            y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
            if np.abs(y.sum()) == n:          # need both labels
                y[0] = -y[0]
            c = float(rng.choice([0.5, 1.0, 10.0]))
            k = learn.rbf_kernel(x, x, gamma=0.5)
            alpha, b = learn.smo_train(k, y, c, seed=trial)
            assert np.all(alpha >= -1e-12)
            assert np.all(alpha <= c + 1e-12)
            assert abs((alpha * y).sum()) < 1e-6
            assert learn.kkt_violation(k, y, alpha, b, c) <= learn.SVM_TOL + 1e-9

    def test_separable_problem_trains_to_zero_error(self, rng):
        x, y01 = make_blobs(rng, [(-5.0, 0.0), (5.0, 0.0)], 30)
        y = np.where(y01 == 1, 1.0, -1.0)
        k = learn.rbf_kernel(x, x, gamma=0.5)
        alpha, b = learn.smo_train(k, y, c=100.0)
        f = k @ (alpha * y) + b
        assert np.all(np.sign(f) == y)

    def test_xor_problem(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        y = np.array([1.0, 1.0, -1.0, -1.0])
        k = learn.rbf_kernel(x, x, gamma=2.0)
        alpha, b = learn.smo_train(k, y, c=100.0)
        f = k @ (alpha * y) + b
        assert np.all(np.sign(f) == y)

    def test_rejects_bad_labels(self):
        k = np.eye(4)
        with pytest.raises(ValueError):
            learn.smo_train(k, np.array([1.0, 0.0, 1.0, -1.0]), 1.0)


class TestMulticlassSvm:
    def test_separable_three_class(self, rng):
        x, y = make_blobs(rng, [(-6, 0), (6, 0), (0, 8)], 20)
        model = learn.svm_train(x, y, c=10.0, gamma=0.5, n_classes=3)
        pred, conf = learn.svm_predict(model, x)
        assert (pred == y).all()
        assert np.allclose(conf.sum(axis=1), 1.0)

    def test_vote_oracle(self, rng):
        # re-evaluate every pair decision in plain numpy and compare votes
        x, y = make_blobs(rng, [(-4, 0), (4, 0), (0, 5), (0, -5)], 12,
                          scale=1.5)
        model = learn.svm_train(x, y, c=5.0, gamma=0.3, n_classes=4)
        test = rng.normal(0, 4.0, (30, 2))
        pred, conf = learn.svm_predict(model, test)
        k = learn.rbf_kernel(test, x, gamma=0.3)
        votes = np.zeros((30, 4))
        for t, (p, q) in enumerate(model.pairs):
            m = model.pair_cnt[t]
            idx = model.pair_idx[t, :m]
            py = np.where(y[idx] == p, 1.0, -1.0)
            dec = k[:, idx] @ (model.alphas[t, :m] * py) + model.biases[t]
            votes[:, p] += dec >= 0
            votes[:, q] += dec < 0
        assert np.allclose(conf, votes / votes.sum(axis=1, keepdims=True))
        # the argmax-by-votes prediction must be consistent wherever the
        # vote winner is unique
        unique = (votes == votes.max(axis=1, keepdims=True)).sum(axis=1) == 1
        assert (pred[unique] == votes[unique].argmax(axis=1)).all()

    def test_single_class_rejected(self, rng):
        x = rng.normal(size=(10, 2))
        with pytest.raises(ValueError):
            learn.svm_train(x, np.zeros(10, dtype=np.int64), 1.0, 0.5, 2)


class TestGridSearch:
    def test_single_candidate(self, rng):
        x, y = make_blobs(rng, [(-4, 0), (4, 0)], 15)
        res = learn.cross_validate_hyperparams(
            x, y, 2, seed=0, c_exponents=(2,), gamma_exponents=(-2,))
        assert res.c == 4.0
        assert res.gamma == 0.25
        assert len(res.table) == 1

    def test_tie_prefers_small_c_then_gamma(self, rng):
        # well-separated blobs: every candidate reaches 100% CV accuracy
        x, y = make_blobs(rng, [(-30, 0), (30, 0)], 15, scale=0.1)
        res = learn.cross_validate_hyperparams(
            x, y, 2, seed=0, c_exponents=(0, 4), gamma_exponents=(-4, -2))
        assert res.accuracy == 1.0
        assert res.c == 1.0
        assert res.gamma == 2.0 ** -4

    def test_table_covers_grid(self, rng):
        x, y = make_blobs(rng, [(-4, 0), (4, 0)], 12)
        res = learn.cross_validate_hyperparams(
            x, y, 2, seed=1, c_exponents=(-2, 2), gamma_exponents=(-2, 0))
        assert set(res.table) == {(2.0 ** c, 2.0 ** g)
                                  for c in (-2, 2) for g in (-2, 0)}
        assert res.accuracy == max(res.table.values())


class TestEvaluate:
    def test_perfect_prediction(self):
        y = np.array([0, 1, 2, 1])
        conf = np.eye(3)[y]
        acc, cm = learn.evaluate(y, y, conf, 3)
        assert acc == 1.0
        assert np.trace(cm.counts) == 4
        assert cm.counts.sum() == 4

    def test_known_confusion(self):
        true_y = np.array([0, 0, 1, 1])
        pred_y = np.array([0, 1, 1, 1])
        conf = np.eye(2)[pred_y]
        acc, cm = learn.evaluate(true_y, pred_y, conf, 2)
        assert acc == 0.75
        assert cm.counts[0, 1] == 1
        assert cm.confidence[0, 0] == pytest.approx(0.5)

    def test_json_round(self):
        y = np.array([0, 1])
        acc, cm = learn.evaluate(y, y, np.eye(2), 2)
        obj = cm.to_json(["a", "b"])
        assert obj["classes"] == ["a", "b"]
        assert obj["counts"][0][0] == 1


class TestTrainedModel:
    def test_knn_fit_predict(self, rng):
        x, y = make_blobs(rng, [(-5, 0), (5, 0), (0, 6)], 10)
        model = learn.fit_model("knn", "lab90", ["a", "b", "c"], x, y)
        pred, _ = model.predict(x)
        assert (pred == y).all()

    def test_svm_fit_predict(self, rng):
        x, y = make_blobs(rng, [(-5, 0), (5, 0)], 12)
        model = learn.fit_model("svm", "lab90", ["a", "b"], x, y,
                                c=10.0, gamma=0.5)
        pred, _ = model.predict(x)
        assert (pred == y).all()

    def test_grid_search_fit(self, rng):
        x, y = make_blobs(rng, [(-8, 0), (8, 0)], 9)
        model = learn.fit_model("svm", "lab90", ["a", "b"], x, y,
                                grid_search=True, seed=2)
        assert model.c > 0 and model.gamma > 0
        pred, _ = model.predict(x)
        assert (pred == y).all()

    def test_save_load_round_trip(self, rng, tmp_path):
        x, y = make_blobs(rng, [(-5, 0), (5, 0)], 10)
        model = learn.fit_model("svm", "lab90", ["a", "b"], x, y,
                                c=4.0, gamma=0.25, seed=3)
        path = tmp_path / "model.bin"
        model.save(path)
        back = learn.TrainedModel.load(path)
        assert back.algorithm == "svm"
        assert back.class_names == ["a", "b"]
        assert np.array_equal(back.train_x, model.train_x)
        test = rng.normal(0, 4, (20, 2))
        pa, _ = model.predict(test)
        pb, _ = back.predict(test)
        assert np.array_equal(pa, pb)

    def test_save_is_byte_deterministic(self, rng, tmp_path):
        x, y = make_blobs(rng, [(-5, 0), (5, 0)], 10)
        model = learn.fit_model("knn", "lab90", ["a", "b"], x, y)
        p1, p2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        model.save(p1)
        model.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_rejects_non_model(self, tmp_path):
        path = tmp_path / "d.bin"
        core.save_arrays(path, {"type": "dictionary"}, {"x": np.zeros(2)})
        with pytest.raises(core.DecodeError):
            learn.TrainedModel.load(path)

    def test_unknown_algorithm(self, rng):
        x, y = make_blobs(rng, [(-5, 0), (5, 0)], 5)
        model = learn.fit_model("knn", "lab90", ["a", "b"], x, y)
        model.algorithm = "forest"
        with pytest.raises(core.ConfigError):
            model.predict(x)
