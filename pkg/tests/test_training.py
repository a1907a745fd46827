import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cardioxnet import layers as L
from cardioxnet.errors import ConfigError, DataError, NumericalError
from cardioxnet.model import ModelConfig, build_model
from cardioxnet.signal import AudioClip, Dataset
from cardioxnet.training import (AdamState, EpochRecord, MetricsReport, TrainConfig, adam_step,
                                 confusion_from_csv, confusion_to_csv, cross_validate, cv_from_csv,
                                 cv_to_csv, evaluate, history_from_csv, history_to_csv,
                                 metrics_from_csv, metrics_to_csv, softmax_ce_grad, sparse_ce_loss,
                                 split_dataset, stratified_kfold, train)


def _dataset(counts, length=64, seed=0, names=None):
    """Random clips; class k has mean 0.3 * (k - 1) so the classes are separable."""
    r = np.random.default_rng(seed)
    names = names or [f"c{i}" for i in range(len(counts))]
    clips = [AudioClip(np.clip(r.normal(0.3 * (k - 1), 0.2, length), -1, 1), 2000, names[k], f"{names[k]}:{i}")
             for k, n in enumerate(counts) for i in range(n)]
    return Dataset(clips, names)


def _tiny(**kw):
    return ModelConfig.tiny(**kw)


# --------------------------------------------------------------------------
# loss

def test_loss_perfect_predictions():
    assert sparse_ce_loss(np.eye(4), [0, 1, 2, 3]) <= 1e-11


@pytest.mark.parametrize("K", [2, 3, 5, 11])
def test_loss_uniform_is_log_k(K):
    assert sparse_ce_loss(np.full((7, K), 1 / K), np.arange(7) % K) == pytest.approx(math.log(K), abs=1e-14)


def test_loss_matches_per_sample_sum(rng):
    p = L.softmax(rng.standard_normal((9, 5)))
    y = rng.integers(0, 5, 9)
    want = -sum(math.log(p[b, y[b]]) for b in range(9)) / 9
    assert sparse_ce_loss(p, y) == pytest.approx(want, rel=1e-14)


def test_loss_clamps_zero_probability():
    assert sparse_ce_loss(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        sparse_ce_loss(np.full((2, 3), 1 / 3), [0, 3])
    with pytest.raises(ValueError):
        sparse_ce_loss(np.full((2, 3), 1 / 3), [-1, 0])


def test_ce_gradient_closed_form_vs_differences(rng):
    for _ in range(10):
        B, K = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        z, y = rng.standard_normal((B, K)) * 2, rng.integers(0, K, B)
        g = softmax_ce_grad(L.softmax(z), y)
        fd = np.zeros_like(z)
        for idx in np.ndindex(*z.shape):
            h = 1e-5 * max(1.0, abs(z[idx]))
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (sparse_ce_loss(L.softmax(zp), y) - sparse_ce_loss(L.softmax(zm), y)) / (2 * h)
        assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-6


# --------------------------------------------------------------------------
# Adam

def test_adam_first_step_is_lr_sign():
    cfg = TrainConfig(learning_rate=1e-3)
    p = {"w": np.zeros(5)}
    g = np.array([3.0, -0.5, 1e-2, -40.0, 1.0])
    adam_step(p, {"w": g}, AdamState(), cfg)
    step = -p["w"]
    assert np.all(np.sign(step) == np.sign(g))
    assert np.all((np.abs(step) >= 0.999 * 1e-3) & (np.abs(step) <= 1e-3))


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.arange(4.0)}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(4)}, state, TrainConfig(learning_rate=0.1))
    np.testing.assert_array_equal(p["w"], np.arange(4.0))
    assert state.step == 5


def test_adam_three_step_scalar_recurrence():
    cfg = TrainConfig(learning_rate=0.01, beta1=0.8, beta2=0.95, epsilon=1e-7)
    grads = [0.7, -1.3, 0.2]
    theta, m, v = 1.5, 0.0, 0.0
    expect = []
    for t, g in enumerate(grads, 1):
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        theta = theta - 0.01 * (m / (1 - 0.8 ** t)) / (math.sqrt(v / (1 - 0.95 ** t)) + 1e-7)
        expect.append(theta)
    p, state = {"x": np.array([1.5])}, AdamState()
    for g, want in zip(grads, expect):
        adam_step(p, {"x": np.array([g])}, state, cfg)
        assert abs(p["x"][0] - want) < 1e-12


def test_adam_nonfinite_gradient_names_parameter():
    with pytest.raises(NumericalError, match="head.w"):
        adam_step({"head.w": np.zeros(2)}, {"head.w": np.array([1.0, np.nan])}, AdamState(), TrainConfig())


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.beta1, cfg.beta2, cfg.epsilon) == (1e-5, 16, 0.9, 0.999, 1e-7)
    for bad in ({"learning_rate": -1}, {"batch_size": 0}, {"epochs": 0}, {"beta1": 1.0}, {"epsilon": 0}):
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, **bad).validate()
    assert TrainConfig.from_kv(cfg.to_kv()) == cfg


# --------------------------------------------------------------------------
# splitting

def test_split_70_10_20_proportions():
    ds = _dataset([200] * 5, length=4)
    tr, va, te = split_dataset(ds, seed=3)
    assert tr.counts == {c: 140 for c in ds.class_names}
    assert va.counts == {c: 20 for c in ds.class_names}
    assert te.counts == {c: 40 for c in ds.class_names}


def test_split_deterministic():
    ds = _dataset([30, 17], length=4)
    a = [[c.source_id for c in part.clips] for part in split_dataset(ds, seed=9)]
    b = [[c.source_id for c in part.clips] for part in split_dataset(ds, seed=9)]
    c = [[c.source_id for c in part.clips] for part in split_dataset(ds, seed=10)]
    assert a == b and a != c


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(3, 40), min_size=1, max_size=5), seed=st.integers(0, 1000))
def test_split_partitions_and_gives_remainder_to_train(counts, seed):
    ds = _dataset(counts, length=2)
    parts = split_dataset(ds, seed=seed)
    ids = [[c.source_id for c in p.clips] for p in parts]
    flat = [i for p in ids for i in p]
    assert len(flat) == len(set(flat)) == len(ds)
    for name, n in zip(ds.class_names, counts):
        assert parts[1].counts[name] == math.floor(0.1 * n + 1e-9)
        assert parts[2].counts[name] == math.floor(0.2 * n + 1e-9)


def test_split_rejects_tiny_class():
    with pytest.raises(DataError, match="at least 3"):
        split_dataset(_dataset([10, 2], length=2))


def test_kfold_ten_folds_of_hundred():
    plan = stratified_kfold(_dataset([200] * 5, length=2), 10, seed=0)
    assert plan.k == 10
    assert all(len(f) == 100 for f in plan.folds)
    assert all(h == {f"c{i}": 20 for i in range(5)} for h in plan.histograms)


def test_kfold_leave_one_out():
    ds = _dataset([6], length=2)
    plan = stratified_kfold(ds, 6)
    assert sorted(int(f[0]) for f in plan.folds) == list(range(6))
    assert all(len(f) == 1 for f in plan.folds)


def test_kfold_rejects_small_class():
    with pytest.raises(DataError):
        stratified_kfold(_dataset([10, 4], length=2), 5)


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(2, 30), min_size=1, max_size=5), k=st.integers(2, 6),
       seed=st.integers(0, 1000))
def test_kfold_properties(counts, k, seed):
    counts = [max(c, k) for c in counts]
    ds = _dataset(counts, length=2)
    plan = stratified_kfold(ds, k, seed)
    flat = np.concatenate(plan.folds)
    assert sorted(flat.tolist()) == list(range(len(ds)))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for name in ds.class_names:
        per = [h[name] for h in plan.histograms]
        assert max(per) - min(per) <= 1
    again = stratified_kfold(ds, k, seed)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


# --------------------------------------------------------------------------
# metrics

def test_metrics_hand_example():
    # class 0: TP 9, FN 1, FP 1, TN 9
    truth = [0] * 10 + [1] * 10
    pred = [0] * 9 + [1] + [0] + [1] * 9
    r = MetricsReport.from_predictions(truth, pred, ["a", "b"])
    assert (r.tp[0], r.fp[0], r.fn[0], r.tn[0]) == (9, 1, 1, 9)
    for v in (r.precision[0], r.recall[0], r.f1[0], r.class_accuracy[0]):
        assert v == pytest.approx(0.9, abs=1e-15)


def test_metrics_perfect():
    y = np.repeat(np.arange(4), [3, 5, 2, 7])
    r = MetricsReport.from_predictions(y, y, list("abcd"))
    np.testing.assert_array_equal(r.confusion, np.diag([3, 5, 2, 7]))
    assert r.accuracy == 1.0
    assert all(v == 1.0 for v in r.macro.values())


def test_metrics_match_independent_tally(rng):
    for _ in range(20):
        n = int(rng.integers(1, 80))
        truth, pred = rng.integers(0, 3, n), rng.integers(0, 3, n)
        r = MetricsReport.from_predictions(truth, pred, ["x", "y", "z"])
        for k, (tp, fp, tn, fn) in enumerate(oracles.metrics_tally(truth, pred, 3)):
            assert (r.tp[k], r.fp[k], r.tn[k], r.fn[k]) == (tp, fp, tn, fn)
            assert r.precision[k] == (tp / (tp + fp) if tp + fp else 0.0)
            assert r.recall[k] == (tp / (tp + fn) if tp + fn else 0.0)
            assert r.f1[k] == (2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        np.testing.assert_array_equal(r.confusion.sum(1), np.bincount(truth, minlength=3))
        assert r.tp.sum() == np.sum(truth == pred)
        assert r.accuracy == pytest.approx(np.trace(r.confusion) / n, abs=0)
        assert r.micro_precision == pytest.approx(r.accuracy, abs=1e-15)
        assert r.micro_recall == pytest.approx(r.accuracy, abs=1e-15)


def test_metrics_undefined_precision_flagged():
    r = MetricsReport.from_predictions([0, 1, 2], [0, 0, 0], list("abc"))
    assert r.precision[1] == 0.0 and r.precision[2] == 0.0
    assert list(r.undefined_precision) == [False, True, True]


def test_macro_is_unweighted_mean():
    r = MetricsReport.from_predictions([0, 0, 0, 1], [0, 0, 1, 1], ["a", "b"])
    assert r.macro["precision"] == pytest.approx((1.0 + 0.5) / 2)
    assert r.macro["recall"] == pytest.approx((2 / 3 + 1.0) / 2)


def test_evaluate_rejects_empty():
    with pytest.raises(DataError):
        evaluate(build_model(_tiny()), Dataset([], ["AS", "MR", "MS", "MVP", "N"]))


# --------------------------------------------------------------------------
# training loop

def _small_task():
    ds = _dataset([6, 6, 6], seed=1)
    return ds, _tiny(num_classes=3)


def test_zero_learning_rate_keeps_loss_constant():
    ds, cfg = _small_task()
    model = build_model(dataclasses.replace(cfg, dropout=0.0), seed=0)
    tc = TrainConfig(learning_rate=0.0, epochs=6, batch_size=4, patience=0, freeze_batchnorm=True)
    _, hist = train(model, ds, None, tc)
    losses = [h.train_loss for h in hist]
    assert len(hist) == 6
    assert max(losses) - min(losses) <= 1e-9


def test_training_is_deterministic():
    ds, cfg = _small_task()
    tc = TrainConfig(learning_rate=1e-2, epochs=5, batch_size=4)
    runs = [train(build_model(cfg, seed=4), ds, ds.subset([0, 6, 12]), tc) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for k, v in runs[0][0].state().items():
        assert v.tobytes() == runs[1][0].state()[k].tobytes()


def test_training_reduces_loss():
    ds, cfg = _small_task()
    _, hist = train(build_model(cfg, 0), ds, None, TrainConfig(learning_rate=1e-2, epochs=40, batch_size=6))
    assert hist[-1].train_loss < 0.5 * hist[0].train_loss


def test_early_stopping_and_best_weights():
    ds, cfg = _small_task()
    tc = TrainConfig(learning_rate=1e-2, epochs=200, batch_size=6, patience=3)
    model, hist = train(build_model(cfg, 0), ds, ds, tc)
    assert len(hist) < 200
    best = max(hist, key=lambda h: (h.val_accuracy, -h.val_loss))
    report = evaluate(model, ds)
    assert report.accuracy == pytest.approx(best.val_accuracy)


def test_training_rejects_empty_and_mismatched_sets():
    with pytest.raises(DataError):
        train(build_model(_tiny()), Dataset([], list("abcde")), None, TrainConfig())
    with pytest.raises(DataError, match="expects"):
        train(build_model(_tiny(num_classes=2)), _dataset([3, 3], length=50), None, TrainConfig())


def test_training_aborts_on_nonfinite_loss():
    ds, cfg = _small_task()
    model = build_model(cfg, 0)
    model.head[1].params["b"][...] = np.nan
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        train(model, ds, None, TrainConfig(epochs=2))


def test_lone_trailing_sample_is_merged():
    ds, cfg = _small_task()
    _, hist = train(build_model(cfg, 0), ds, None, TrainConfig(epochs=2, batch_size=17))
    assert len(hist) == 2


# --------------------------------------------------------------------------
# cross-validation

def test_constant_predictor_cross_validation():
    ds = _dataset([12, 4, 8], seed=2)
    cfg = _tiny(num_classes=3)

    def constant(seed):
        m = build_model(cfg, seed)
        m.head[1].params["w"][...] = 0.0
        m.head[1].params["b"][...] = [0.0, 0.0, 5.0]
        return m

    tc = TrainConfig(learning_rate=0.0, epochs=1, batch_size=8, freeze_batchnorm=True)
    result = cross_validate(ds, cfg, tc, k=4, model_factory=constant)
    plan = stratified_kfold(ds, 4, tc.seed)
    for report, hist in zip(result.reports, plan.histograms):
        assert report.accuracy == pytest.approx(hist["c2"] / sum(hist.values()))
    assert result.mean["accuracy"] == pytest.approx(np.mean([r.accuracy for r in result.reports]))


# --------------------------------------------------------------------------
# CSV

def test_history_csv_round_trip():
    hist = [EpochRecord(1, 0.1 + 0.2, 1 / 3, math.nan, 0.0), EpochRecord(2, 1e-300, 1.0, 2.5, 0.75)]
    back = history_from_csv(history_to_csv(hist))
    assert back[0].train_loss == 0.1 + 0.2 and back[0].train_accuracy == 1 / 3
    assert math.isnan(back[0].val_loss)
    assert back[1] == hist[1]
    assert history_to_csv(hist).splitlines()[0] == "epoch,train_loss,train_accuracy,val_loss,val_accuracy"


def test_metrics_and_confusion_csv_round_trip(rng):
    truth, pred = rng.integers(0, 5, 60), rng.integers(0, 5, 60)
    r = MetricsReport.from_predictions(truth, pred, ["AS", "MR", "MS", "MVP", "N"])
    rows = metrics_from_csv(metrics_to_csv(r))
    assert [row["class"] for row in rows] == r.class_names + ["macro"]
    for i, row in enumerate(rows[:-1]):
        assert (row["tp"], row["fp"], row["tn"], row["fn"]) == (r.tp[i], r.fp[i], r.tn[i], r.fn[i])
        assert row["precision"] == r.precision[i] and row["f1"] == r.f1[i]
    assert rows[-1]["recall"] == r.macro["recall"]
    back = confusion_from_csv(confusion_to_csv(r))
    np.testing.assert_array_equal(back.confusion, r.confusion)
    assert back.class_names == r.class_names


def test_cv_csv_round_trip():
    reports = [MetricsReport.from_predictions([0, 1, 1], [0, 1, 0], ["a", "b"]),
               MetricsReport.from_predictions([0, 1, 1], [0, 1, 1], ["a", "b"])]
    from cardioxnet.training import CrossValResult
    res = CrossValResult(reports, [[], []])
    rows = cv_from_csv(cv_to_csv(res))
    assert [r["fold"] for r in rows] == ["1", "2", "mean", "std"]
    assert rows[2]["accuracy"] == res.mean["accuracy"]
    assert rows[3]["f1"] == res.std["f1"]
