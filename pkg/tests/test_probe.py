import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wdis import models
from wdis.probe import (
    CORR_COLUMNS,
    CorrRow,
    CorrTable,
    LinearProbe,
    MetricsReport,
    ProbeTask,
    accuracy,
    corr_experiment,
    probe_grid,
    top_k_accuracy,
    train_probe,
)


def test_accuracy_ties_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    assert accuracy(logits, np.array([0, 1])) == 1.0
    assert accuracy(logits, np.array([1, 2])) == 0.0


def test_top_k_bounds(rng):
    logits = rng.normal(size=(200, 10))
    y = rng.integers(0, 10, 200)
    assert top_k_accuracy(logits, y, 5) >= accuracy(logits, y)
    assert top_k_accuracy(logits, y, 10) == 1.0


def test_separable_features_reach_full_accuracy(rng):
    y = rng.integers(0, 5, 400)
    x = np.eye(5)[y]
    probe = LinearProbe(n_classes=5, steps=200).fit(x, y)
    assert probe.score(x, y) == 1.0


def test_noise_features_near_chance(rng):
    k, n_val = 8, 4000
    x, y = rng.normal(size=(2000, 6)), rng.integers(0, k, 2000)
    xv, yv = rng.normal(size=(n_val, 6)), rng.integers(0, k, n_val)
    acc = LinearProbe(n_classes=k, steps=500).fit(x, y).score(xv, yv)
    assert abs(acc - 1 / k) < 3 * np.sqrt((1 / k) * (1 - 1 / k) / n_val)


def test_probe_deterministic(rng):
    x, y = rng.normal(size=(300, 4)), rng.integers(0, 3, 300)
    a = LinearProbe(steps=100, random_state=4).fit(x, y)
    b = LinearProbe(steps=100, random_state=4).fit(x, y)
    assert np.array_equal(a.coef_, b.coef_) and np.array_equal(a.intercept_, b.intercept_)


def test_probe_sklearn_contract(rng):
    p = LinearProbe(lr=0.05, steps=10)
    assert p.get_params()["lr"] == 0.05
    q = clone(p).set_params(steps=20)
    assert q.steps == 20 and p.steps == 10
    with pytest.raises(NotFittedError):
        p.predict(np.zeros((1, 2)))
    p.fit(rng.normal(size=(20, 2)), rng.integers(0, 3, 20))
    proba = p.predict_proba(rng.normal(size=(5, 2)))
    assert np.allclose(proba.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        p.predict(np.zeros((1, 3)))


def test_probe_target_validation(rng):
    with pytest.raises(ValueError):
        LinearProbe(n_classes=2).fit(rng.normal(size=(4, 2)), np.array([0, 1, 2, 0]))


def test_task_validation():
    with pytest.raises(ValueError):
        ProbeTask("z_mid", "l_fg")
    with pytest.raises(ValueError):
        ProbeTask("z_fg", "l_mid")


def test_train_probe_drops_missing_targets(rng):
    z = rng.normal(size=(50, 6))
    fg, bg = rng.integers(0, 3, 50), rng.integers(0, 2, 50)
    bg[:10] = -1
    probe = train_probe(z, fg, bg, ProbeTask("z_bg", "l_bg"), 4, 2, {"steps": 10})
    assert probe.n_features_in_ == 2


def test_grid_on_random_extractor_is_well_formed(rng):
    arch = models.Architecture()
    p = models.init_params(arch, 0)
    x = rng.normal(size=(300, 32))
    fg, bg = rng.integers(0, 16, 300), rng.integers(0, 8, 300)
    z = np.concatenate(models.extract(p, x, arch), axis=1)
    before = p.digest()
    report = probe_grid(z, fg, bg, z, fg, bg, 16, 16, 8, {"steps": 50})
    assert p.digest() == before
    assert set(report.accuracies) == {"fg_from_fg", "fg_from_bg", "bg_from_bg", "bg_from_fg"}
    assert all(0.0 <= a <= 1.0 for a in report.accuracies.values())
    assert report.top5["fg_from_fg"] >= report.accuracies["fg_from_fg"]


def test_grid_needs_eval_background(rng):
    z = rng.normal(size=(10, 4))
    fg, bg = rng.integers(0, 2, 10), rng.integers(0, 2, 10)
    bad = bg.copy()
    bad[0] = -1
    with pytest.raises(ValueError):
        probe_grid(z, fg, bg, z, fg, bad, 2, 2, 2)


def test_metrics_report_range():
    with pytest.raises(ValueError):
        MetricsReport(accuracies={"fg_from_fg": 1.2})


def test_corr_row_average():
    cells = dict(zip(CORR_COLUMNS, [0.9957, 0.974, 0.9929, 0.9036, 0.9277]))
    row = CorrRow("correct", cells)
    assert abs(row.average - np.mean(list(cells.values()))) < 1e-12


def test_corr_experiment_shape(rng):
    def feats():
        return tuple(rng.normal(size=(40, 6)) for _ in range(4))

    labels = {k: (rng.integers(0, 4, 40), rng.integers(0, 2, 40)) for k in
              ("corr_train", "corr_val", "anticorr_val", "unbiased_val")}
    table = corr_experiment({"correct": feats(), "all": feats(), "baseline": feats()}, labels, 4, 4, 2, {"steps": 5})
    assert [r.variant for r in table.rows] == ["correct", "all", "baseline"]
    lines = table.to_csv().strip().splitlines()
    assert lines[0] == "model,corr_fg,anticorr_fg,corr_bg,anticorr_bg,unbiased_fg,average"
    assert len(lines) == 4 and all(len(line.split(",")) == 7 for line in lines)
    assert set(table.to_dict()) == {"correct", "all", "baseline"}
    with pytest.raises(KeyError):
        table.row("other")
    assert isinstance(table, CorrTable)
