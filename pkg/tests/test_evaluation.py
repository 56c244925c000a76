import csv
import itertools

import numpy as np
import pytest

from cimlite.data import default_config, make_dataset
from cimlite.errors import ConfigurationError, DimensionError, NumericalError
from cimlite.evaluation import (
    EvalReport,
    TrainConfig,
    accuracy,
    balanced_accuracy,
    class_weights,
    compare_reports,
    confusion_matrix,
    linear_eval,
    per_class_recall,
    train_supervised,
    wasserstein_1d,
    weighted_cross_entropy,
)
from cimlite.model import CimConfig, build_cim, embed, forward_features, forward_head


@pytest.fixture(scope="module")
def bundle():
    return make_dataset(default_config(n_cells=400, patch_size=12))


# ------------------------------------------------------------------ class weights and loss


def test_class_weights_examples():
    np.testing.assert_allclose(class_weights(np.array([0, 1, 0, 1])), [1.0, 1.0])
    w = class_weights(np.r_[np.zeros(90, int), np.ones(10, int)])
    raw = np.array([100 / 180, 100 / 20])
    np.testing.assert_allclose(w, raw / raw.mean())
    np.testing.assert_allclose(w, [0.2, 1.8])
    with pytest.raises(ConfigurationError):
        class_weights(np.zeros(5, int))
    with pytest.raises(ConfigurationError):
        class_weights(np.array([0, 0, 2]), 3)


def _naive_wce(logits, labels, weights):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += weights[y] * (lse - row[y])
    return total / len(labels)


@pytest.mark.parametrize("seed", range(10))
def test_weighted_cross_entropy_matches_loop(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, size=(7, 4))
    labels = rng.integers(0, 4, size=7)
    w = rng.uniform(0.2, 3.0, size=4)
    assert abs(weighted_cross_entropy(logits, labels, w).item() - _naive_wce(logits, labels, w)) < 1e-10


def test_weighted_cross_entropy_special_cases():
    labels = np.array([0, 1, 2, 3])
    assert weighted_cross_entropy(np.zeros((4, 4)), labels).item() == pytest.approx(np.log(4))
    w = np.array([2.0, 2.0, 2.0, 2.0])
    assert weighted_cross_entropy(np.zeros((4, 4)), labels, w).item() == pytest.approx(2 * np.log(4))
    big = np.full((2, 3), -1e3)
    big[[0, 1], [1, 2]] = 1e3
    assert weighted_cross_entropy(big, np.array([1, 2])).item() < 1e-12
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    assert weighted_cross_entropy(logits, y, np.ones(3)).item() == pytest.approx(weighted_cross_entropy(logits, y).item(), abs=1e-15)
    with pytest.raises(NumericalError):
        weighted_cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))
    with pytest.raises(DimensionError):
        weighted_cross_entropy(np.zeros((2, 3)), np.array([0]))


# ------------------------------------------------------------------ metrics


def test_metric_examples():
    eye = np.eye(3, dtype=int) * 5
    assert accuracy(eye) == balanced_accuracy(eye) == 1.0
    np.testing.assert_array_equal(per_class_recall(eye), [1, 1, 1])
    assert balanced_accuracy(np.array([[4, 0], [3, 3]])) == pytest.approx(0.75)
    with pytest.raises(ConfigurationError):
        accuracy(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        accuracy(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_naive_loops(seed):
    rng = np.random.default_rng(seed)
    k = 4
    y = rng.integers(0, k, size=60)
    p = rng.integers(0, k, size=60)
    cm = confusion_matrix(y, p, k)
    naive = [[sum(1 for a, b in zip(y, p) if a == i and b == j) for j in range(k)] for i in range(k)]
    assert cm.tolist() == naive
    assert accuracy(cm) == sum(a == b for a, b in zip(y, p)) / 60
    recalls = [sum(1 for a, b in zip(y, p) if a == b == c) / sum(1 for a in y if a == c) for c in range(k) if c in y]
    assert balanced_accuracy(cm) == pytest.approx(sum(recalls) / len(recalls), abs=1e-15)


def test_recall_of_absent_class_is_nan_and_skipped():
    cm = np.array([[3, 1, 0], [0, 0, 0], [1, 0, 1]])
    r = per_class_recall(cm)
    assert np.isnan(r[1])
    assert balanced_accuracy(cm) == pytest.approx((0.75 + 0.5) / 2)


def _sorted_diff(a, b):
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def test_wasserstein_examples_and_oracle():
    assert wasserstein_1d([0.3, 0.3, 1.0], [1.0, 0.3, 0.3]) == 0
    assert wasserstein_1d([0.0], [1.0]) == 1.0
    assert wasserstein_1d([0, 1], [0.5, 1.5]) == pytest.approx(0.5, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        a, b = rng.normal(size=n), rng.exponential(size=n)
        assert abs(wasserstein_1d(a, b) - _sorted_diff(a, b)) < 1e-12
    with pytest.raises(ConfigurationError):
        wasserstein_1d([], [1.0])


def test_wasserstein_unequal_sizes_use_quantile_functions():
    # one sample at 0 vs {0, 1}: half the mass moves distance 1
    assert wasserstein_1d([0.0], [0.0, 1.0]) == pytest.approx(0.5)
    a, b = [0.0, 1.0, 2.0], [0.0, 0.0, 1.0, 1.0, 2.0, 2.0]
    assert wasserstein_1d(a, b) == pytest.approx(0.0, abs=1e-15)


def test_wasserstein_is_a_metric():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b, c = (rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2), size=int(rng.integers(2, 30))) for _ in range(3))
        ab, ba = wasserstein_1d(a, b), wasserstein_1d(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab <= wasserstein_1d(a, c) + wasserstein_1d(c, b) + 1e-12


# ------------------------------------------------------------------ training


def test_linear_probe_on_separable_embeddings_keeps_backbone(bundle):
    m = build_cim(CimConfig.cim_s(8, input_size=12))
    before = m.digest()
    report, probe, history = linear_eval(bundle, m, TrainConfig(epochs=30, seed=0))
    assert report.balanced_accuracy >= 0.95
    assert m.digest() == before
    assert len(history) == 30 and probe.weight.shape == (bundle.n_classes, 32)


def test_linear_eval_is_deterministic(bundle):
    m = build_cim(CimConfig.cim_s(8, input_size=12))
    a, pa, _ = linear_eval(bundle, m, TrainConfig(epochs=3, seed=4))
    b, pb, _ = linear_eval(bundle, m, TrainConfig(epochs=3, seed=4))
    assert np.array_equal(a.confusion, b.confusion) and np.array_equal(pa.weight, pb.weight)


def test_zero_epochs_is_the_untrained_head(bundle):
    m = build_cim(CimConfig.cim_s(8, num_classes=bundle.n_classes, input_size=12))
    best, report, history = train_supervised(bundle, m, TrainConfig(epochs=0))
    assert history == []
    xt, yt = bundle.subset("test")
    _, pooled = forward_features(m.astype(np.float32), xt)
    pred = np.argmax(forward_head(m.astype(np.float32), pooled, "classifier").data, axis=1)
    assert np.array_equal(report.confusion, confusion_matrix(yt, pred, bundle.n_classes))
    assert best.digest() == m.astype(np.float32).digest()


def test_supervised_training_runs_and_is_deterministic(bundle):
    m = build_cim(CimConfig.cim_s(8, num_classes=bundle.n_classes, input_size=12))
    cfg = TrainConfig(epochs=2, seed=1, batch_size=32)
    a, ra, ha = train_supervised(bundle, m, cfg)
    b, rb, hb = train_supervised(bundle, m, cfg)
    assert a.digest() == b.digest() and ha == hb
    assert len(ha) == 2 and np.isfinite(ha[-1]["loss"])
    with pytest.raises(ConfigurationError):
        train_supervised(bundle, build_cim(CimConfig.cim_s(8, input_size=12)), cfg)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0).validate()


def test_embeddings_have_block_layout(bundle):
    emb = embed(build_cim(CimConfig.cim_s(8, input_size=12)), bundle.patches[:4])
    assert emb.shape == (4, 32)


# ------------------------------------------------------------------ reports


def test_report_roundtrip_and_csv(tmp_path):
    r = EvalReport(np.array([[3, 1], [0, 2]]), ["a", "b"], {"train": 7, "val": 2, "test": 6}, "cim")
    r.to_json(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert np.array_equal(back.confusion, r.confusion) and back.class_names == r.class_names and back.name == "cim"
    assert back.to_dict() == r.to_dict()
    r.write_confusion_csv(tmp_path / "c.csv")
    r.write_recall_csv(tmp_path / "rec.csv")
    with open(tmp_path / "rec.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[1] == ["a", "0.75", "4"] and rows[2] == ["b", "1.0", "2"]
    assert "balanced accuracy 0.8750" in r.table()


def test_compare_reports():
    a = EvalReport(np.eye(2, dtype=int), ["x", "y"], name="cim")
    b = EvalReport(np.array([[1, 0], [1, 0]]), ["x", "y"], name="base")
    out = compare_reports([a, b])
    assert out["models"] == ["cim", "base"]
    assert out["balanced_accuracy"] == {"cim": 1.0, "base": 0.5}
    assert list(itertools.chain(out["per_class_recall"]["base"].values())) == [1.0, 0.0]
