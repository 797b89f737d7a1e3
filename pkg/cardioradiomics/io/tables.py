"""CSV tables: UTF-8, comma separated, header row, missing values as empty cells."""
import os

import numpy as np
import pandas as pd

from cardioradiomics.errors import IoError


def write_csv(frame: pd.DataFrame, path, index=False):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
        frame.to_csv(str(path), index=index, na_rep="", encoding="utf-8",
                     lineterminator="\n")
    except OSError as exc:
        raise IoError("cannot write {}: {}".format(path, exc)) from exc


def read_csv(path, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(str(path), encoding="utf-8", **kwargs)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise IoError("cannot read {}: {}".format(path, exc)) from exc


def write_features(rows, path):
    """rows: list of (subject_id, FeatureVector) in output order."""
    frame = pd.DataFrame([dict(v) for _, v in rows],
                         index=pd.Index([s for s, _ in rows], name="subject_id"))
    write_csv(frame, path, index=True)


def read_features(path) -> pd.DataFrame:
    return read_csv(path, dtype={"subject_id": str}).set_index("subject_id")


def test_missing_values_are_empty_cells(tmp_path):
    from cardioradiomics.features import MISSING, FeatureVector
    rows = [("s1", FeatureVector(LV_glcm_Contrast=1.5, AO_glcm_Contrast=MISSING)),
            ("s2", FeatureVector(LV_glcm_Contrast=0.1, AO_glcm_Contrast=2.0))]
    write_features(rows, tmp_path / "f.csv")
    text = (tmp_path / "f.csv").read_text()
    assert text.splitlines()[0] == "subject_id,LV_glcm_Contrast,AO_glcm_Contrast"
    assert text.splitlines()[1] == "s1,1.5,"
    back = read_features(tmp_path / "f.csv")
    assert np.isnan(back.loc["s1", "AO_glcm_Contrast"])
    assert back.loc["s2", "LV_glcm_Contrast"] == 0.1


def test_read_missing_file(tmp_path):
    import pytest
    with pytest.raises(IoError):
        read_csv(tmp_path / "nope.csv")
