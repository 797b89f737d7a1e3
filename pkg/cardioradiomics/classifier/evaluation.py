import logging
from dataclasses import dataclass
from functools import partial

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from cardioradiomics.classifier.mlp import MlpModel, TrainConfig, predict, train
from cardioradiomics.classifier.table import FeatureTable, standardize
from cardioradiomics.errors import DataError, InsufficientData, LengthMismatch
from cardioradiomics.workers import map_ordered

log = logging.getLogger(__name__)

METRICS = ("accuracy", "precision", "recall", "f1", "specificity")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float

    def as_dict(self):
        return {k: getattr(self, k) for k in METRICS}


def _percent(num, den):
    return 100.0*num/den if den else 0.0


def classification_metrics(pred, true) -> Metrics:
    """Confusion-matrix metrics in percent; a zero denominator gives 0."""
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    true = np.asarray(true).astype(np.int64).reshape(-1)
    if len(pred) != len(true):
        raise LengthMismatch("{} predictions for {} labels".format(len(pred), len(true)))
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    precision = _percent(tp, tp + fp)
    recall = _percent(tp, tp + fn)
    f1 = 2*precision*recall/(precision + recall) if precision + recall > 0 else 0.0
    return Metrics(_percent(tp + tn, len(true)), precision, recall, f1, _percent(tn, tn + fp))


@dataclass
class EvalReport:
    folds: pd.DataFrame   # one row per (seed, fold)
    mean: dict
    std: dict             # population std over folds x seeds

    @classmethod
    def from_folds(cls, rows):
        frame = pd.DataFrame(rows, columns=["seed", "fold", "n_train", "n_test"] + list(METRICS))
        return cls(frame,
                   {k: float(frame[k].mean()) for k in METRICS},
                   {k: float(np.std(frame[k].to_numpy(), ddof=0)) for k in METRICS})

    def cell(self, metric):
        return "{:.2f} ± {:.2f}".format(self.mean[metric], self.std[metric])


def format_table(reports) -> str:
    """Text table with one "mean ± std" row per feature set."""
    header = ["Features"] + [k.capitalize() if k != "f1" else "F1" for k in METRICS]
    rows = [[name] + [r.cell(k) for k in METRICS] for name, r in reports.items()]
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + rows]
    lines.insert(1, "  ".join("-"*w for w in widths))
    return "\n".join(lines) + "\n"


def fold_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def mlp_fit_predict(train_table: FeatureTable, test_table: FeatureTable, cfg: TrainConfig, seed):
    """Standardises on the training fold, trains a fresh MLP and labels the test fold."""
    train_s, scaler = standardize(train_table, train_table)
    test_s = scaler.transform(test_table)
    model = MlpModel.create(len(train_s.columns), cfg.hidden_layers, cfg.hidden_units, cfg.dropout, seed=seed)
    model, _ = train(model, train_s, cfg.replace(seed=seed))
    return predict(model, test_s)[1]


def _run_fold(cfg, fit_predict, job):
    seed, fold, train_table, test_table = job
    train_table = train_table.select(cfg.selector, cfg.n_svd)
    test_table = test_table.select(cfg.selector, cfg.n_svd)
    if not train_table.columns:
        raise DataError("no feature columns for selector '{}'".format(cfg.selector))
    labels = fit_predict(train_table, test_table, cfg, fold_seed(cfg.seed, seed, fold))
    row = {"seed": seed, "fold": fold, "n_train": len(train_table), "n_test": len(test_table)}
    row.update(classification_metrics(labels, test_table.labels).as_dict())
    return row


def cross_validate(table: FeatureTable, cfg=None, folds=5, seeds=3, fit_predict=None,
                   feature_provider=None) -> EvalReport:
    """Stratified k-fold CV repeated over seeds 0..seeds-1.

    Columns are chosen per ``cfg.selector``/``cfg.n_svd``. ``feature_provider(seed,
    fold, train_ids, test_ids)`` may rebuild the (train, test) tables per fold;
    ``fit_predict(train, test, cfg, seed)`` returns test-fold labels.
    """
    cfg = cfg or TrainConfig()
    fit_predict = fit_predict or mlp_fit_predict
    counts = np.bincount(table.labels, minlength=2)
    if counts.min() < folds:
        raise InsufficientData("{} folds need {} subjects per class, have {}".format(
            folds, folds, counts.tolist()))
    jobs = []
    for seed in range(seeds):
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        for fold, (tr, te) in enumerate(splitter.split(table.X, table.labels)):
            if feature_provider is None:
                train_table, test_table = table.subset(tr), table.subset(te)
            else:
                train_table, test_table = feature_provider(
                    seed, fold, [table.subject_ids[i] for i in tr], [table.subject_ids[i] for i in te])
            jobs.append((seed, fold, train_table, test_table))
    rows = map_ordered(partial(_run_fold, cfg, fit_predict), jobs)
    report = EvalReport.from_folds(rows)
    log.info("%s: accuracy %s, f1 %s", cfg.selector, report.cell("accuracy"), report.cell("f1"))
    return report


def write_report(report: EvalReport, path):
    from cardioradiomics.io.tables import write_csv
    write_csv(report.folds, path)


def _constant_fit_predict(train_table, test_table, cfg, seed):
    return np.ones(len(test_table), dtype=np.int64)


def _toy(n=20, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    X = rng.normal(0, 0.7, size=(n, 3)) + np.where(labels[:, None] == 1, 1.5, -1.5)
    X[::7, 2] = np.nan
    return FeatureTable(["p{:02d}".format(i) for i in range(n)], ["LV_firstorder_Mean", "x_b", "x_c"],
                        X, labels)


def test_metrics_by_hand():
    true = [1]*10 + [0]*10
    pred = [1]*9 + [0] + [1] + [0]*9
    m = classification_metrics(pred, true)
    assert m.as_dict() == {k: 90.0 for k in METRICS}
    m = classification_metrics([0]*4, [1, 1, 0, 0])
    assert m.recall == 0.0 and m.specificity == 100.0 and m.precision == 0.0 and m.f1 == 0.0
    assert set(classification_metrics(true, true).as_dict().values()) == {100.0}


def test_metrics_length_mismatch():
    import pytest
    with pytest.raises(LengthMismatch):
        classification_metrics([0, 1], [0, 1, 1])


def test_constant_prediction_scores_class_balance():
    report = cross_validate(_toy(), folds=5, seeds=3, fit_predict=_constant_fit_predict)
    assert len(report.folds) == 15
    assert report.mean["accuracy"] == 50.0 and report.std["accuracy"] == 0.0
    assert report.mean["recall"] == 100.0


def test_cross_validation_is_deterministic_and_consistent():
    cfg = TrainConfig(learning_rate=1e-2, epochs=100, hidden_layers=1, hidden_units=8, dropout=0.0)
    a = cross_validate(_toy(), cfg, folds=5, seeds=2)
    b = cross_validate(_toy(), cfg, folds=5, seeds=2)
    pd.testing.assert_frame_equal(a.folds, b.folds)
    assert a.mean == b.mean and a.std == b.std
    for _, row in a.folds.iterrows():
        p, r = row["precision"], row["recall"]
        expected = 2*p*r/(p + r) if p + r > 0 else 0.0
        assert abs(row["f1"] - expected) <= 1e-12
        assert all(0.0 <= row[k] <= 100.0 for k in METRICS)
    assert a.mean["accuracy"] >= 80.0


def test_insufficient_data():
    import pytest
    with pytest.raises(InsufficientData):
        cross_validate(_toy(8), folds=5, seeds=1, fit_predict=_constant_fit_predict)


def test_format_table():
    report = EvalReport.from_folds([
        {"seed": 0, "fold": 0, "n_train": 4, "n_test": 1, **{k: 100.0 for k in METRICS}},
        {"seed": 0, "fold": 1, "n_train": 4, "n_test": 1, **{k: 50.0 for k in METRICS}},
    ])
    assert report.cell("accuracy") == "75.00 ± 25.00"
    text = format_table({"Combined": report})
    assert text.splitlines()[0].startswith("Features")
    assert "75.00 ± 25.00" in text.splitlines()[2]
