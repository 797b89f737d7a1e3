"""Seeded random and successive-halving search over MLP hyperparameters.

Trials are scored by mean cross-validated F1 on the table they are given; the
caller decides whether that table is an outer training fold or the full cohort.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from cardioradiomics.classifier.evaluation import cross_validate, mlp_fit_predict
from cardioradiomics.classifier.mlp import (DROPOUT_RANGE, EPOCH_LATTICE, LAYER_RANGE, LR_RANGE, UNIT_RANGE,
                                            TrainConfig)
from cardioradiomics.errors import ConfigError

log = logging.getLogger(__name__)

STRATEGIES = ("random", "halving")
ETA = 3
SEARCHED = ("learning_rate", "epochs", "hidden_layers", "hidden_units", "dropout", "n_svd")
LOG_COLUMNS = ["trial", "rung", "n_seeds"] + list(SEARCHED) + ["f1_mean", "f1_std", "accuracy_mean"]


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple = LR_RANGE       # log-uniform
    epochs: tuple = EPOCH_LATTICE         # uniform over the lattice
    hidden_layers: tuple = LAYER_RANGE    # inclusive integer range
    hidden_units: tuple = UNIT_RANGE      # log-uniform integer
    dropout: tuple = DROPOUT_RANGE
    n_svd: tuple = (1, 2, 3)

    def sample(self, rng, base=None) -> TrainConfig:
        base = base or TrainConfig()
        lr_lo, lr_hi = np.log(self.learning_rate[0]), np.log(self.learning_rate[1])
        u_lo, u_hi = np.log(self.hidden_units[0]), np.log(self.hidden_units[1])
        units = int(np.clip(round(float(np.exp(rng.uniform(u_lo, u_hi)))), *self.hidden_units))
        cfg = base.replace(
            learning_rate=float(np.exp(rng.uniform(lr_lo, lr_hi))),
            epochs=int(rng.choice(self.epochs)),
            hidden_layers=int(rng.integers(self.hidden_layers[0], self.hidden_layers[1] + 1)),
            hidden_units=units,
            dropout=float(rng.uniform(*self.dropout)),
            n_svd=int(rng.choice(self.n_svd)))
        return cfg.check_ranges()


def _row(trial, rung, n_seeds, cfg, report):
    row = {"trial": trial, "rung": rung, "n_seeds": n_seeds}
    row.update({k: getattr(cfg, k) for k in SEARCHED})
    row.update(f1_mean=report.mean["f1"], f1_std=report.std["f1"], accuracy_mean=report.mean["accuracy"])
    return row


def _best(scores):
    # strict > keeps the lowest trial index on ties
    best = None
    for trial in sorted(scores):
        if best is None or scores[trial] > scores[best]:
            best = trial
    return best


def hyperparameter_search(table, budget=50, space=None, base=None, strategy="random", baseline=None,
                          folds=5, seeds=3, seed=0, fit_predict=None):
    """Returns (best TrainConfig, trial log frame).

    ``baseline``, when given, is evaluated as trial 0 and counts against the
    budget. With ``strategy="halving"`` every trial starts on one CV seed and
    the best third moves to the next rung with three times as many seeds,
    until one trial remains or the rung uses all ``seeds``.
    """
    if budget < 1:
        raise ConfigError("search budget must be at least 1, got {}".format(budget))
    if strategy not in STRATEGIES:
        raise ConfigError("strategy must be one of {}, got {!r}".format(STRATEGIES, strategy))
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    configs = [baseline.check_ranges()] if baseline is not None else []
    while len(configs) < budget:
        configs.append(space.sample(rng, base))

    rows = []

    def evaluate(candidates, rung, n_seeds):
        scores = {}
        for trial in candidates:
            report = cross_validate(table, configs[trial], folds=folds, seeds=n_seeds, fit_predict=fit_predict)
            rows.append(_row(trial, rung, n_seeds, configs[trial], report))
            scores[trial] = report.mean["f1"]
            log.debug("trial %d rung %d: f1 %s", trial, rung, report.cell("f1"))
        return scores

    if strategy == "random":
        scores = evaluate(range(len(configs)), 0, seeds)
    else:
        candidates, rung = list(range(len(configs))), 0
        while True:
            n_seeds = min(seeds, ETA**rung)
            scores = evaluate(candidates, rung, n_seeds)
            if len(candidates) == 1 or n_seeds >= seeds:
                break
            ranked = sorted(candidates, key=lambda t: (-scores[t], t))
            candidates = sorted(ranked[:math.ceil(len(candidates)/ETA)])
            rung += 1

    best = _best(scores)
    log.info("best of %d trials: trial %d, f1 %.2f", len(configs), best, scores[best])
    return configs[best], pd.DataFrame(rows, columns=LOG_COLUMNS)


def write_trials(trials: pd.DataFrame, path):
    from cardioradiomics.io.tables import write_csv
    write_csv(trials, path)


@dataclass(frozen=True)
class NestedSearch:
    """``fit_predict`` for :func:`cross_validate` that searches on each outer training fold.

    The test fold never takes part in choosing the configuration. The
    selector and ``n_svd`` of the outer configuration are kept fixed because
    the fold tables arrive already reduced to those columns.
    """
    budget: int = 50
    strategy: str = "random"
    folds: int = 5
    seeds: int = 1
    seed: int = 0
    space: SearchSpace = None
    fit_predict: object = None

    def __call__(self, train_table, test_table, cfg, seed):
        space = dataclasses.replace(self.space or SearchSpace(), n_svd=(cfg.n_svd,))
        best, _ = hyperparameter_search(train_table, self.budget, space=space, base=cfg, strategy=self.strategy,
                                        baseline=cfg, folds=self.folds, seeds=self.seeds, seed=self.seed,
                                        fit_predict=self.fit_predict)
        return (self.fit_predict or mlp_fit_predict)(train_table, test_table, best, seed)


def _constant(train_table, test_table, cfg, seed):
    return np.ones(len(test_table), dtype=np.int64)


_SMALL = SearchSpace(epochs=(100, 125), hidden_layers=(1, 2), hidden_units=(8, 16))


def test_sample_respects_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cfg = SearchSpace().sample(rng)
        assert LR_RANGE[0] <= cfg.learning_rate <= LR_RANGE[1]
        assert cfg.epochs in EPOCH_LATTICE and cfg.n_svd in (1, 2, 3)
        assert 8 <= cfg.hidden_units <= 512 and 1 <= cfg.hidden_layers <= 12


def test_budget_one_returns_the_sampled_config():
    from cardioradiomics.classifier.evaluation import _toy
    best, trials = hyperparameter_search(_toy(), budget=1, folds=5, seeds=1, seed=4, fit_predict=_constant)
    assert best == SearchSpace().sample(np.random.default_rng(4))
    assert len(trials) == 1 and list(trials.columns) == LOG_COLUMNS


def test_ties_go_to_the_lowest_trial():
    from cardioradiomics.classifier.evaluation import _toy
    best, trials = hyperparameter_search(_toy(), budget=5, folds=5, seeds=1, fit_predict=_constant)
    assert trials["f1_mean"].nunique() == 1
    assert best == SearchSpace().sample(np.random.default_rng(0))
    baseline = TrainConfig()
    best, trials = hyperparameter_search(_toy(), budget=3, baseline=baseline, folds=5, seeds=1,
                                         fit_predict=_constant)
    assert best == baseline and len(trials) == 3


def test_halving_rungs():
    from cardioradiomics.classifier.evaluation import _toy
    best, trials = hyperparameter_search(_toy(), budget=9, strategy="halving", folds=5, seeds=3,
                                         fit_predict=_constant)
    assert list(trials.groupby("rung").size()) == [9, 3]
    assert list(trials[trials.rung == 1].trial) == [0, 1, 2]
    assert set(trials[trials.rung == 1].n_seeds) == {3}
    assert best == SearchSpace().sample(np.random.default_rng(0))


def test_search_beats_or_matches_default():
    from cardioradiomics.classifier.evaluation import _toy
    table = _toy()
    default = TrainConfig(epochs=100, hidden_layers=1, hidden_units=8)
    best, trials = hyperparameter_search(table, budget=4, space=_SMALL, baseline=default, folds=5, seeds=1)
    baseline_f1 = trials[trials.trial == 0].f1_mean.iloc[0]
    assert trials.f1_mean.max() >= baseline_f1
    assert cross_validate(table, best, folds=5, seeds=1).mean["f1"] >= baseline_f1


def test_bad_search_arguments():
    import pytest
    with pytest.raises(ConfigError):
        hyperparameter_search(None, budget=0)
    with pytest.raises(ConfigError):
        hyperparameter_search(None, strategy="grid")


def test_nested_search_never_sees_the_test_fold():
    from cardioradiomics.classifier.evaluation import _toy
    seen = []

    def recording(train_table, test_table, cfg, seed):
        seen.append((set(train_table.subject_ids), set(test_table.subject_ids)))
        return _constant(train_table, test_table, cfg, seed)

    table = _toy(30)
    nested = NestedSearch(budget=2, folds=2, seeds=1, fit_predict=recording)
    report = cross_validate(table, TrainConfig(n_svd=2), folds=3, seeds=1, fit_predict=nested)
    assert report.mean["accuracy"] == 50.0
    # per outer fold: 2 trials x 2 inner folds, then the final fit
    assert len(seen) == 3*(2*2 + 1)
    for outer in range(3):
        calls = seen[outer*5:(outer + 1)*5]
        outer_train, outer_test = calls[-1]
        for train_ids, test_ids in calls[:-1]:
            assert (train_ids | test_ids) == outer_train
            assert not (train_ids | test_ids) & outer_test
