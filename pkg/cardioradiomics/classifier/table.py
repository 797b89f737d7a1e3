import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from cardioradiomics.errors import ColumnMismatch, ConfigError, DataError, InvalidNSvd, LengthMismatch

SELECTORS = ("radiomic", "geometric", "combined")
GEOM_MARKER = "_geom_"

_SV = re.compile(r"_geom_sv(\d+)$")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    subject_ids: tuple
    columns: tuple
    X: np.ndarray        # (n, D), NaN marks a missing feature
    labels: np.ndarray   # (n,) 0 healthy, 1 diseased

    def __post_init__(self):
        ids = tuple(str(s) for s in self.subject_ids)
        X = np.array(self.X, dtype=np.float64).reshape(len(ids), -1)
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids in feature table")
        if len(labels) != len(ids):
            raise LengthMismatch("{} labels for {} subjects".format(len(labels), len(ids)))
        if X.shape[1] != len(self.columns):
            raise ColumnMismatch("{} columns named, {} present".format(len(self.columns), X.shape[1]))
        if not np.all(np.isin(labels, (0, 1))):
            raise DataError("labels must be 0 (healthy) or 1 (diseased)")
        object.__setattr__(self, "subject_ids", ids)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, index):
        index = np.asarray(index)
        return FeatureTable([self.subject_ids[i] for i in index], self.columns, self.X[index], self.labels[index])

    def with_values(self, X):
        return FeatureTable(self.subject_ids, self.columns, X, self.labels)

    def take_columns(self, names):
        pos = {c: i for i, c in enumerate(self.columns)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ColumnMismatch("unknown columns {}".format(missing[:5]))
        return FeatureTable(self.subject_ids, names, self.X[:, [pos[n] for n in names]], self.labels)

    def select(self, selector, n_svd=3):
        """Radiomic, geometric or combined columns; geometric singular values beyond n_svd are dropped."""
        return self.take_columns(select_columns(self.columns, selector, n_svd))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=list(self.columns))
        frame.insert(0, "subject_id", list(self.subject_ids))
        frame["label"] = self.labels
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame):
        for col in ("subject_id", "label"):
            if col not in frame.columns:
                raise ColumnMismatch("feature table lacks a '{}' column".format(col))
        columns = [c for c in frame.columns if c not in ("subject_id", "label")]
        return cls(frame["subject_id"].astype(str).tolist(), columns,
                   frame[columns].to_numpy(dtype=np.float64), frame["label"].to_numpy())

    @classmethod
    def from_features(cls, features: pd.DataFrame, labels: pd.DataFrame):
        """Joins per-subject feature frames (indexed by subject id) with a labels table."""
        labels = labels.astype({"subject_id": str}).set_index("subject_id")["label"]
        features = features.copy()
        features.index = features.index.astype(str)
        missing = sorted(set(features.index) - set(labels.index))
        if missing:
            raise DataError("no label for subjects {}".format(missing[:5]))
        return cls(list(features.index), list(features.columns),
                   features.to_numpy(dtype=np.float64), labels.loc[features.index].to_numpy())


def select_columns(columns, selector, n_svd=3):
    if selector not in SELECTORS:
        raise ConfigError("selector must be one of {}, got {!r}".format(SELECTORS, selector))
    if n_svd not in (1, 2, 3):
        raise InvalidNSvd("n_svd must be 1, 2 or 3, got {}".format(n_svd))

    def keep_geometric(c):
        m = _SV.search(c)
        return m is None or int(m.group(1)) <= n_svd

    radiomic = [c for c in columns if GEOM_MARKER not in c]
    geometric = [c for c in columns if GEOM_MARKER in c and keep_geometric(c)]
    return {"radiomic": radiomic, "geometric": geometric, "combined": radiomic + geometric}[selector]


def read_table(path) -> FeatureTable:
    from cardioradiomics.io.tables import read_csv
    return FeatureTable.from_frame(read_csv(path, dtype={"subject_id": str}))


def write_table(table: FeatureTable, path):
    from cardioradiomics.io.tables import write_csv
    write_csv(table.to_frame(), path)


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    columns: tuple

    def transform(self, table: FeatureTable) -> FeatureTable:
        if tuple(table.columns) != tuple(self.columns):
            raise ColumnMismatch("table columns differ from the fitted scaler")
        X = np.where(np.isnan(table.X), self.mean, table.X)
        scale = np.where(self.std > 0, self.std, 1.0)
        return table.with_values(np.where(self.std > 0, (X - self.mean)/scale, 0.0))


def fit_scaler(train: FeatureTable) -> Scaler:
    """Train-fold column means (ignoring missing values) and population stds after imputation."""
    X = train.X
    present = ~np.isnan(X)
    counts = present.sum(axis=0)
    mean = np.where(counts > 0, np.where(present, X, 0.0).sum(axis=0)/np.maximum(counts, 1), 0.0)
    imputed = np.where(present, X, mean)
    return Scaler(mean, imputed.std(axis=0), tuple(train.columns))


def standardize(train: FeatureTable, apply_to: FeatureTable):
    """z-scores ``apply_to`` with statistics fitted on ``train`` only."""
    if tuple(train.columns) != tuple(apply_to.columns):
        raise ColumnMismatch("train and apply_to have different columns")
    scaler = fit_scaler(train)
    return scaler.transform(apply_to), scaler


def _table(X, labels=None, columns=None):
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    return FeatureTable(["s{}".format(i) for i in range(n)],
                        columns or ["f{}".format(j) for j in range(d)],
                        X, labels if labels is not None else np.arange(n) % 2)


def test_standardize_by_hand():
    train = _table([[1.0, 5.0], [3.0, 5.0]])
    out, scaler = standardize(train, train)
    np.testing.assert_array_equal(out.X, [[-1.0, 0.0], [1.0, 0.0]])
    other = _table([[2.0, 7.0]], labels=[1])
    np.testing.assert_array_equal(scaler.transform(other).X, [[0.0, 0.0]])


def test_missing_values_imputed_with_train_mean():
    train = _table([[1.0], [np.nan], [3.0], [np.nan]])
    out, scaler = standardize(train, train)
    assert scaler.mean[0] == 2.0
    assert out.X[1, 0] == 0.0 and not np.isnan(out.X).any()
    all_missing = _table([[np.nan], [np.nan]])
    out, _ = standardize(all_missing, all_missing)
    np.testing.assert_array_equal(out.X, 0.0)


def test_scaler_ignores_test_rows():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 4))
    table = _table(X)
    train, test = table.subset(range(7)), table.subset(range(7, 10))
    _, a = standardize(train, test)
    _, b = standardize(train, test.with_values(test.X*100 + 3))
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)


def test_column_mismatch():
    import pytest
    with pytest.raises(ColumnMismatch):
        standardize(_table([[1.0, 2.0]]), _table([[1.0, 2.0]], columns=["a", "b"]))


def test_select_columns():
    cols = ["LV_firstorder_Mean", "LV_geom_sv1", "LV_geom_sv2", "LV_geom_sv3",
            "LV_geom_meanmag", "RV_glcm_Contrast"]
    assert select_columns(cols, "radiomic") == ["LV_firstorder_Mean", "RV_glcm_Contrast"]
    assert select_columns(cols, "geometric", 1) == ["LV_geom_sv1", "LV_geom_meanmag"]
    assert len(select_columns(cols, "combined", 2)) == 5


def test_table_round_trip(tmp_path):
    t = _table([[1.0, np.nan], [0.5, 2.0]], columns=["LV_firstorder_Mean", "LV_geom_sv1"])
    write_table(t, tmp_path/"t.csv")
    back = read_table(tmp_path/"t.csv")
    assert back.subject_ids == t.subject_ids and back.columns == t.columns
    np.testing.assert_array_equal(back.X, t.X)
    np.testing.assert_array_equal(back.labels, t.labels)
    assert "subject_id,LV_firstorder_Mean,LV_geom_sv1,label" in (tmp_path/"t.csv").read_text()


def test_bad_tables():
    import pytest
    with pytest.raises(DataError):
        FeatureTable(["a", "a"], ["f"], [[1.0], [2.0]], [0, 1])
    with pytest.raises(DataError):
        FeatureTable(["a", "b"], ["f"], [[1.0], [2.0]], [0, 2])
