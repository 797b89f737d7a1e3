from collections import OrderedDict

import numpy as np

from cardioradiomics.util import STRUCTURES

# Quiet "not available" marker for features of absent structures. It is
# written to CSV as an empty cell and imputed at training time.
MISSING = float("nan")


class FeatureVector(OrderedDict):
    """Ordered (name, value) pairs; names are unique by construction."""

    def values_array(self):
        return np.array(list(self.values()), dtype=np.float64)

    @classmethod
    def missing(cls, names):
        return cls((n, MISSING) for n in names)


def feature_name(code, family, name):
    return "{}_{}_{}".format(STRUCTURES[code], family, name)


def concat_structures(per_structure, family_names):
    """Concatenates per-structure vectors in structure-code order.

    per_structure maps code -> {family: FeatureVector or None}; None means the
    structure was absent and gets sentinel values.
    """
    out = FeatureVector()
    for code in STRUCTURES:
        families = per_structure.get(code) or {}
        for family, names in family_names.items():
            vec = families.get(family)
            if vec is None:
                vec = FeatureVector.missing(names)
            for name in names:
                out[feature_name(code, family, name)] = float(vec[name])
    return out


def test_concat_structures_fills_missing():
    names = {"firstorder": ["Mean"]}
    out = concat_structures({1: {"firstorder": FeatureVector(Mean=3.0)}}, names)
    assert list(out)[0] == "LV_firstorder_Mean"
    assert out["LV_firstorder_Mean"] == 3.0
    assert len(out) == 7
    assert np.isnan(out["PT_firstorder_Mean"])
