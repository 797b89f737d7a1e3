"""Builds an atlas from the healthy half of a small synthetic cohort.

    python -m cardioradiomics.examples.atlas_demo [outdir]

Prints per-subject registration QC and the atlas structure volumes.
"""
import logging
import os
import sys

import numpy as np

from cardioradiomics.registration import RegistrationParams, build_atlas, registration_qc, save_atlas
from cardioradiomics.synthetic import SyntheticCohortSpec, synthesize_subject
from cardioradiomics.util import STRUCTURES

if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = sys.argv[1] if len(sys.argv) > 1 else "atlas_demo"

    spec = SyntheticCohortSpec(n_healthy=8, n_diseased=1)
    cohort = [synthesize_subject(spec, i)[1] for i in range(spec.n_healthy)]
    atlas, fields = build_atlas(cohort, iterations=3, params=RegistrationParams())
    save_atlas(atlas, os.path.join(out, "atlas"))

    print(registration_qc([spec.subject_id(i) for i in range(spec.n_healthy)], fields).to_string(index=False))
    voxel = float(np.prod(atlas.labels.spacing))
    for code, name in STRUCTURES.items():
        mean = np.mean([np.count_nonzero(l.data == code) for l in cohort])*voxel
        print("{:>4}: atlas {:8.0f} mm^3, cohort mean {:8.0f} mm^3".format(
            name, np.count_nonzero(atlas.labels.data == code)*voxel, mean))
