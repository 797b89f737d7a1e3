"""End-to-end run: radiomics, atlas registration, geometric features and
cross-validated classification for every feature set.

Each stage writes its outputs under ``paths.out`` together with a stamp of
the configuration it ran with. A rerun skips a stage whose stamp matches and
whose outputs are newer than its inputs, so a finished run can be repeated
without touching a single output byte.
"""
import configparser
import dataclasses
import hashlib
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd

from cardioradiomics import workers
from cardioradiomics.classifier.evaluation import METRICS, EvalReport, cross_validate, format_table, write_report
from cardioradiomics.classifier.mlp import TrainConfig
from cardioradiomics.classifier.search import STRATEGIES, NestedSearch, hyperparameter_search, write_trials
from cardioradiomics.classifier.table import GEOM_MARKER, SELECTORS, FeatureTable, write_table
from cardioradiomics.errors import (CardioError, ColumnMismatch, ConfigError, DataError, EmptyCohort,
                                    InvalidNSvd, InvalidSpacing, IoError, StageError)
from cardioradiomics.geometry import MAX_SVD, extract_geometric
from cardioradiomics.io.nifti import load_labelmap, load_volume
from cardioradiomics.io.tables import read_csv, read_features, write_csv, write_features
from cardioradiomics.radiomics.extract import RadiomicsConfig, extract_radiomics
from cardioradiomics.registration import (RegistrationParams, build_atlas, load_field, register, registration_qc,
                                          save_atlas, save_field, to_soft_labels)
from cardioradiomics.volume import common_lattice, resample_to_lattice
from cardioradiomics.workers import map_ordered

log = logging.getLogger(__name__)

# mean and std (percent) per metric reported on the 40-subject ASOCA cohort
REFERENCE = OrderedDict([
    ("combined", OrderedDict([("accuracy", (87.50, 10.21)), ("precision", (88.11, 13.70)),
                              ("recall", (90.00, 12.25)), ("f1", (88.01, 9.27)),
                              ("specificity", (85.00, 17.80))])),
    ("radiomic", OrderedDict([("accuracy", (82.50, 11.50)), ("precision", (83.60, 14.80)),
                              ("recall", (85.00, 14.00)), ("f1", (83.70, 10.80)),
                              ("specificity", (80.00, 19.00))])),
    ("geometric", OrderedDict([("accuracy", (76.67, 11.96)), ("precision", (83.56, 16.67)),
                               ("recall", (73.33, 23.21)), ("f1", (74.35, 15.08)),
                               ("specificity", (80.00, 20.82))])),
])

TITLES = {"combined": "Radiomic + Geometric", "radiomic": "Radiomic only", "geometric": "Geometric only"}


class StageLog(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        return "[{}] {}".format(self.extra["stage"], msg), kwargs


def stage_log(stage):
    return StageLog(log, {"stage": stage})


@dataclass
class PathsConfig:
    images: str = "images"
    labelmaps: str = "labelmaps"
    labels: str = "labels.csv"
    out: str = "out"
    # unset output directories live under ``out``
    atlas: str = None
    fields: str = None
    features: str = None
    reports: str = None

    def dir(self, name):
        return getattr(self, name) or os.path.join(self.out, name)


@dataclass
class GeometryConfig:
    n_svd: int = 3
    center: bool = False
    # isotropic spacing in mm of the registration lattice; None keeps the finest input spacing
    spacing: float = None

    def __post_init__(self):
        if self.n_svd not in (1, 2, 3):
            raise InvalidNSvd("n_svd must be 1, 2 or 3, got {}".format(self.n_svd))
        if self.spacing is not None and not self.spacing > 0:
            raise InvalidSpacing("[geometry] spacing must be positive, got {}".format(self.spacing))


@dataclass
class SearchConfig:
    enabled: bool = False
    # tune inside every outer training fold; "no" tunes once on the full table
    nested: bool = True
    budget: int = 50
    strategy: str = "random"
    seed: int = 0
    folds: int = 5
    seeds: int = 1

    def __post_init__(self):
        if self.budget < 1 or self.folds < 2 or self.seeds < 1:
            raise ConfigError("invalid search schedule {}".format(self))
        if self.strategy not in STRATEGIES:
            raise ConfigError("search strategy must be one of {}, got {!r}".format(STRATEGIES, self.strategy))


@dataclass
class RunConfig:
    folds: int = 5
    seeds: int = 3
    selectors: tuple = SELECTORS
    executor: str = "process"
    workers: int = 0            # 0 uses every core
    fold_safe: bool = True
    atlas_iterations: int = 3

    def __post_init__(self):
        self.selectors = tuple(self.selectors)
        bad = [s for s in self.selectors if s not in SELECTORS]
        if bad or not self.selectors:
            raise ConfigError("selectors must be drawn from {}, got {}".format(SELECTORS, self.selectors))
        if self.folds < 2 or self.seeds < 1 or self.workers < 0 or self.atlas_iterations < 0:
            raise ConfigError("invalid run schedule {}".format(self))
        if self.executor not in workers.executors:
            raise ConfigError("executor must be one of {}, got {!r}".format(sorted(workers.executors),
                                                                              self.executor))


SECTIONS = OrderedDict([
    ("paths", PathsConfig),
    ("radiomics", RadiomicsConfig),
    ("registration", RegistrationParams),
    ("geometry", GeometryConfig),
    ("classifier", TrainConfig),
    ("search", SearchConfig),
    ("run", RunConfig),
])

# keys that belong to another section
_EXCLUDED = {"classifier": ("selector", "n_svd")}
_NULLABLE = {("radiomics", "spacing"), ("geometry", "spacing"), ("paths", "atlas"), ("paths", "fields"), ("paths", "features"),
             ("paths", "reports")}


def _keys(section):
    return OrderedDict((f.name, f) for f in dataclasses.fields(SECTIONS[section])
                       if f.init and f.name not in _EXCLUDED.get(section, ()))


def _coerce(section, f, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if (section, f.name) in _NULLABLE and text.lower() in ("", "none"):
        return None
    try:
        if f.type is bool:
            if text.lower() not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError("not a boolean")
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if f.type is int:
            return int(text)
        if f.type is float:
            return float(text)
        if f.type is tuple:
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError("[{}] {} = {!r}: {}".format(section, f.name, raw, exc)) from exc
    return text


def _section(section, given, base=None, base_dir=None):
    known = _keys(section)
    unknown = sorted(set(given) - set(known))
    if unknown:
        raise ConfigError("unknown keys in [{}]: {}".format(section, ", ".join(unknown)))
    values = {k: _coerce(section, known[k], v) for k, v in given.items() if v is not None}
    if section == "paths" and base_dir:
        values = {k: v if v is None or os.path.isabs(v) else os.path.join(base_dir, v) for k, v in values.items()}
    if base is None:
        return SECTIONS[section](**values)
    return dataclasses.replace(base, **values)


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    radiomics: RadiomicsConfig = field(default_factory=RadiomicsConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.classifier.check_ranges()

    @classmethod
    def from_dict(cls, values, base_dir=None):
        """``values`` maps section -> {key: value}; strings are parsed by field type."""
        unknown = sorted(set(values) - set(SECTIONS))
        if unknown:
            raise ConfigError("unknown config sections {}".format(unknown))
        return cls(**{s: _section(s, values.get(s, {}), base_dir=base_dir) for s in SECTIONS})

    @classmethod
    def from_ini(cls, path, overrides=None):
        """Reads an INI file; relative paths resolve against its directory."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(str(path), encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise IoError("cannot read config {}: {}".format(path, exc)) from exc
        except configparser.Error as exc:
            raise ConfigError("cannot parse config {}: {}".format(path, exc)) from exc
        values = {s: dict(parser.items(s)) for s in parser.sections()}
        cfg = cls.from_dict(values, base_dir=os.path.dirname(os.path.abspath(str(path))))
        return cfg.with_overrides(overrides or {})

    def with_overrides(self, overrides):
        """Returns a copy with ``{section: {key: value}}`` applied; None values are ignored."""
        unknown = sorted(set(overrides) - set(SECTIONS))
        if unknown:
            raise ConfigError("unknown config sections {}".format(unknown))
        changed = {s: _section(s, items, base=getattr(self, s)) for s, items in overrides.items() if items}
        return dataclasses.replace(self, **changed)

    def train_config(self, selector):
        return self.classifier.replace(selector=selector, n_svd=self.geometry.n_svd)

    def as_dict(self):
        return OrderedDict((s, dataclasses.asdict(getattr(self, s))) for s in SECTIONS)


def _digest(obj):
    text = json.dumps(obj, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _stamp_path(cfg, stage):
    return os.path.join(cfg.paths.out, "stamps", stage + ".json")


def up_to_date(cfg, stage, digest, inputs, outputs):
    path = _stamp_path(cfg, stage)
    if not os.path.exists(path) or not outputs or not all(os.path.exists(o) for o in outputs):
        return False
    try:
        with open(path, encoding="utf-8") as fh:
            stamp = json.load(fh)
    except (OSError, ValueError):
        return False
    if stamp.get("digest") != digest:
        return False
    newest = max((os.path.getmtime(i) for i in inputs), default=0.0)
    return min(os.path.getmtime(o) for o in outputs) >= newest


def write_stamp(cfg, stage, digest):
    path = _stamp_path(cfg, stage)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"stage": stage, "digest": digest}, fh, sort_keys=True)
    except OSError as exc:
        raise IoError("cannot write {}: {}".format(path, exc)) from exc


@dataclass(frozen=True)
class Subject:
    subject_id: str
    label: int
    image: str
    labelmap: str


def _find(directory, sid, what):
    for ext in (".nii.gz", ".nii"):
        path = os.path.join(directory, sid + ext)
        if os.path.exists(path):
            return path
    raise StageError("load", sid, IoError("no {} in {}".format(what, directory)))


def discover_subjects(paths: PathsConfig, images=True):
    """Subjects listed in the labels table, with their image and labelmap files."""
    frame = read_csv(paths.labels, dtype={"subject_id": str})
    for col in ("subject_id", "label"):
        if col not in frame.columns:
            raise ColumnMismatch("{} lacks a '{}' column".format(paths.labels, col))
    if frame["subject_id"].duplicated().any():
        raise DataError("{} lists a subject twice".format(paths.labels))
    subjects = []
    for sid, label in zip(frame["subject_id"], frame["label"]):
        if label not in (0, 1):
            raise StageError("load", sid, DataError("label must be 0 or 1, got {!r}".format(label)))
        subjects.append(Subject(sid, int(label), _find(paths.images, sid, "image") if images else None,
                                _find(paths.labelmaps, sid, "labelmap")))
    if not subjects:
        raise EmptyCohort("{} lists no subjects".format(paths.labels))
    return subjects


def _guarded(stage, fn, item):
    sid, payload = item
    try:
        return fn(payload)
    except StageError:
        raise
    except (CardioError, ValueError) as exc:
        raise StageError(stage, sid, exc) from exc


def _radiomics_one(config, subject):
    return extract_radiomics(load_volume(subject.image), load_labelmap(subject.labelmap), config)


def run_radiomics_stage(cfg: PipelineConfig, subjects) -> pd.DataFrame:
    slog = stage_log("radiomics")
    out = os.path.join(cfg.paths.dir("features"), "radiomics.csv")
    inputs = [cfg.paths.labels] + [s.image for s in subjects] + [s.labelmap for s in subjects]
    digest = _digest({"radiomics": dataclasses.asdict(cfg.radiomics), "subjects": [s.subject_id for s in subjects]})
    if up_to_date(cfg, "radiomics", digest, inputs, [out]):
        slog.info("outputs up to date, skipping")
        return read_features(out)
    slog.info("extracting %d subjects", len(subjects))
    vectors = map_ordered(partial(_guarded, "radiomics", partial(_radiomics_one, cfg.radiomics)),
                          [(s.subject_id, s) for s in subjects])
    write_features([(s.subject_id, v) for s, v in zip(subjects, vectors)], out)
    write_stamp(cfg, "radiomics", digest)
    return read_features(out)


def load_labelmaps(subjects, spacing=None):
    """Labelmaps of every subject on one common lattice, keyed by subject id."""
    labelmaps = OrderedDict((s.subject_id, _guarded("load", load_labelmap, (s.subject_id, s.labelmap)))
                            for s in subjects)
    dims, step, origin = common_lattice(labelmaps.values(), spacing)
    moved = [sid for sid, l in labelmaps.items() if l.geometry != (dims, step, origin)]
    if moved:
        stage_log("load").info("resampling %d labelmaps onto %s voxels of %s mm", len(moved), dims, step)
    return OrderedDict((sid, resample_to_lattice(l, dims, step, origin)) for sid, l in labelmaps.items())


def _register_one(atlas_soft, params, labelmap):
    return register(to_soft_labels(labelmap, params.label_sigma_mm), atlas_soft, params)


def atlas_and_fields(labelmaps, atlas_ids, params, iterations):
    """Builds an atlas from ``atlas_ids`` only, then registers every other subject to it.

    Returns ``(Atlas, OrderedDict subject_id -> DisplacementField)`` in the
    order of ``labelmaps``.
    """
    chosen = set(atlas_ids)
    cohort = [sid for sid in labelmaps if sid in chosen]
    if not cohort:
        raise StageError("atlas", None, EmptyCohort("no healthy subjects to build the atlas from"))
    try:
        atlas, cohort_fields = build_atlas([labelmaps[sid] for sid in cohort], iterations, params)
    except CardioError as exc:
        raise StageError("atlas", None, exc) from exc
    fields = dict(zip(cohort, cohort_fields))
    others = [sid for sid in labelmaps if sid not in fields]
    registered = map_ordered(partial(_guarded, "register", partial(_register_one, atlas.soft, params)),
                             [(sid, labelmaps[sid]) for sid in others])
    fields.update(zip(others, registered))
    return atlas, OrderedDict((sid, fields[sid]) for sid in labelmaps)


def _atlas_digest(cfg, atlas_ids):
    return _digest({"registration": dataclasses.asdict(cfg.registration), "lattice": cfg.geometry.spacing,
                    "iterations": cfg.run.atlas_iterations, "atlas_ids": sorted(atlas_ids)})


def run_atlas_stage(cfg: PipelineConfig, subjects, labelmaps):
    """Atlas from every healthy subject plus one field per subject, all on disk."""
    slog = stage_log("atlas")
    healthy = [s.subject_id for s in subjects if s.label == 0]
    field_paths = OrderedDict((s.subject_id, os.path.join(cfg.paths.dir("fields"), s.subject_id + ".nii.gz"))
                              for s in subjects)
    atlas_dir = cfg.paths.dir("atlas")
    qc_path = os.path.join(cfg.paths.dir("reports"), "registration_qc.csv")
    outputs = list(field_paths.values()) + [os.path.join(atlas_dir, "atlas_labels.nii.gz"), qc_path]
    digest = _atlas_digest(cfg, healthy) + _digest(list(field_paths))
    if up_to_date(cfg, "atlas", digest, [s.labelmap for s in subjects], outputs):
        slog.info("outputs up to date, skipping")
    else:
        slog.info("building atlas from %d healthy subjects, registering %d others",
                  len(healthy), len(subjects) - len(healthy))
        atlas, fields = atlas_and_fields(labelmaps, healthy, cfg.registration, cfg.run.atlas_iterations)
        save_atlas(atlas, atlas_dir)
        for sid, f in fields.items():
            save_field(f, field_paths[sid])
        qc = registration_qc(list(fields), list(fields.values()))
        write_csv(qc, qc_path)
        slog.info("mean displacement %.2f mm, max folding %.2f%%",
                  qc["mean_displacement_mm"].mean(), qc["folding_percent"].max())
        write_stamp(cfg, "atlas", digest)
    return OrderedDict((sid, load_field(path)) for sid, path in field_paths.items())


def _geometric_one(n_svd, center, payload):
    f, labelmap = payload
    return extract_geometric(f, labelmap, n_svd, center)


def geometric_features(labelmaps, fields, center=False):
    items = [(sid, (fields[sid], labelmaps[sid])) for sid in labelmaps]
    vectors = map_ordered(partial(_guarded, "geomfeat", partial(_geometric_one, MAX_SVD, center)), items)
    return list(zip(labelmaps, vectors))


def run_geometry_stage(cfg: PipelineConfig, subjects, labelmaps, fields) -> pd.DataFrame:
    slog = stage_log("geomfeat")
    out = os.path.join(cfg.paths.dir("features"), "geometric.csv")
    inputs = [os.path.join(cfg.paths.dir("fields"), s.subject_id + ".nii.gz") for s in subjects]
    inputs += [s.labelmap for s in subjects]
    digest = _digest({"center": cfg.geometry.center, "subjects": [s.subject_id for s in subjects]})
    if up_to_date(cfg, "geomfeat", digest, inputs, [out]):
        slog.info("outputs up to date, skipping")
        return read_features(out)
    slog.info("extracting deformation features for %d subjects", len(subjects))
    write_features(geometric_features(labelmaps, fields, cfg.geometry.center), out)
    write_stamp(cfg, "geomfeat", digest)
    return read_features(out)


def feature_table(radiomic: pd.DataFrame, geometric: pd.DataFrame, subjects) -> FeatureTable:
    ids = [s.subject_id for s in subjects]
    for name, frame in (("radiomic", radiomic), ("geometric", geometric)):
        missing = sorted(set(ids) - set(frame.index))
        if missing:
            raise DataError("{} features lack subjects {}".format(name, missing[:5]))
    features = pd.concat([radiomic.loc[ids], geometric.loc[ids]], axis=1)
    labels = pd.DataFrame({"subject_id": ids, "label": [s.label for s in subjects]})
    return FeatureTable.from_features(features, labels)


class FoldSafeGeometry(object):
    """Feature provider whose geometric columns come from a per-fold atlas.

    The atlas of a fold is built from the healthy subjects of its training
    split only; test subjects are registered to it afterwards. Atlases are
    keyed by the hash of their cohort so folds sharing a cohort share work.
    """

    def __init__(self, cfg: PipelineConfig, table: FeatureTable, labelmaps, inputs=()):
        self.cfg = cfg
        self.table = table
        self.labelmaps = labelmaps
        # files whose changes invalidate cached fold atlases
        self.inputs = list(inputs)
        self.labels = dict(zip(table.subject_ids, table.labels))
        self.geometric = [i for i, c in enumerate(table.columns) if GEOM_MARKER in c]
        self.cache = {}

    def key(self, train_ids):
        healthy = sorted(sid for sid in train_ids if self.labels[sid] == 0)
        return hashlib.sha256("\n".join(healthy).encode("utf-8")).hexdigest()[:16], healthy

    def features(self, train_ids) -> pd.DataFrame:
        key, healthy = self.key(train_ids)
        if key in self.cache:
            return self.cache[key]
        slog = stage_log("atlas")
        directory = os.path.join(self.cfg.paths.out, "folds", key)
        out = os.path.join(directory, "geometric.csv")
        digest = _atlas_digest(self.cfg, healthy) + _digest(list(self.labelmaps))
        if up_to_date(self.cfg, os.path.join("folds", key), digest, self.inputs, [out]):
            slog.info("fold atlas %s up to date", key)
        else:
            slog.info("fold atlas %s from %d healthy training subjects", key, len(healthy))
            atlas, fields = atlas_and_fields(self.labelmaps, healthy, self.cfg.registration,
                                             self.cfg.run.atlas_iterations)
            save_atlas(atlas, os.path.join(directory, "atlas"))
            write_features(geometric_features(self.labelmaps, fields, self.cfg.geometry.center), out)
            write_stamp(self.cfg, os.path.join("folds", key), digest)
        self.cache[key] = read_features(out)
        return self.cache[key]

    def __call__(self, seed, fold, train_ids, test_ids):
        geom = self.features(train_ids)
        columns = [self.table.columns[i] for i in self.geometric]
        X = self.table.X.copy()
        X[:, self.geometric] = geom.loc[list(self.table.subject_ids), columns].to_numpy(dtype=np.float64)
        full = self.table.with_values(X)
        index = {sid: i for i, sid in enumerate(full.subject_ids)}
        return full.subset([index[s] for s in train_ids]), full.subset([index[s] for s in test_ids])


def reference_reports():
    return OrderedDict((s, EvalReport(pd.DataFrame(), {k: v[0] for k, v in ref.items()},
                                      {k: v[1] for k, v in ref.items()}))
                       for s, ref in REFERENCE.items())


def ablation_text(reports, folds, seeds):
    ours = OrderedDict((TITLES[s], r) for s, r in reports.items())
    theirs = OrderedDict((TITLES[s], r) for s, r in reference_reports().items())
    return ("{}-fold x {}-seed cross-validation, mean ± std (%)\n\n".format(folds, seeds) +
            format_table(ours) +
            "\nReported on the 40-subject ASOCA cohort; not reproducible without that data:\n\n" +
            format_table(theirs))


def ablation_frame(reports) -> pd.DataFrame:
    rows = [{"selector": s, "metric": k, "mean": r.mean[k], "std": r.std[k]}
            for s, r in reports.items() for k in METRICS]
    return pd.DataFrame(rows, columns=["selector", "metric", "mean", "std"])


def run_classify_stage(cfg: PipelineConfig, table: FeatureTable, inputs, provider=None):
    slog = stage_log("classify")
    reports_dir = cfg.paths.dir("reports")
    cv_paths = OrderedDict((s, os.path.join(reports_dir, "cv_{}.csv".format(s))) for s in cfg.run.selectors)
    text_path = os.path.join(reports_dir, "ablation.txt")
    outputs = list(cv_paths.values()) + [os.path.join(reports_dir, "ablation.csv"), text_path]
    digest = _digest({"classifier": dataclasses.asdict(cfg.classifier), "n_svd": cfg.geometry.n_svd,
                      "search": dataclasses.asdict(cfg.search), "folds": cfg.run.folds,
                      "seeds": cfg.run.seeds, "selectors": cfg.run.selectors, "fold_safe": cfg.run.fold_safe,
                      "atlas": _atlas_digest(cfg, [])})
    if up_to_date(cfg, "classify", digest, inputs, outputs):
        slog.info("outputs up to date, skipping")
        return OrderedDict((s, EvalReport.from_folds(read_csv(p).to_dict("records"))) for s, p in cv_paths.items())

    write_table(table, os.path.join(cfg.paths.dir("features"), "table.csv"))
    reports = OrderedDict()
    for selector in cfg.run.selectors:
        train_cfg = cfg.train_config(selector)
        fit_predict = None
        if cfg.search.enabled and cfg.search.nested:
            slog.info("%s: searching %d configurations (%s) inside every outer fold", selector, cfg.search.budget,
                      cfg.search.strategy)
            fit_predict = NestedSearch(cfg.search.budget, cfg.search.strategy, cfg.search.folds, cfg.search.seeds,
                                       cfg.search.seed)
        elif cfg.search.enabled:
            slog.info("%s: searching %d configurations (%s)", selector, cfg.search.budget, cfg.search.strategy)
            train_cfg, trials = hyperparameter_search(
                table, cfg.search.budget, base=train_cfg, strategy=cfg.search.strategy, baseline=train_cfg,
                folds=cfg.search.folds, seeds=cfg.search.seeds, seed=cfg.search.seed)
            write_trials(trials, os.path.join(reports_dir, "search_{}.csv".format(selector)))
        reports[selector] = cross_validate(table, train_cfg, cfg.run.folds, cfg.run.seeds, fit_predict=fit_predict,
                                           feature_provider=provider)
        write_report(reports[selector], cv_paths[selector])
        slog.info("%s: accuracy %s, f1 %s", selector, reports[selector].cell("accuracy"),
                  reports[selector].cell("f1"))

    write_csv(ablation_frame(reports), os.path.join(reports_dir, "ablation.csv"))
    try:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(ablation_text(reports, cfg.run.folds, cfg.run.seeds))
    except OSError as exc:
        raise IoError("cannot write {}: {}".format(text_path, exc)) from exc
    write_stamp(cfg, "classify", digest)
    return reports


def run_pipeline(cfg: PipelineConfig):
    """Runs every stage and returns the per-selector EvalReports."""
    with workers.use(cfg.run.executor, cfg.run.workers or None):
        subjects = discover_subjects(cfg.paths)
        log.info("%d subjects, %d healthy", len(subjects), sum(s.label == 0 for s in subjects))
        radiomic = run_radiomics_stage(cfg, subjects)
        labelmaps = load_labelmaps(subjects, cfg.geometry.spacing)
        fields = run_atlas_stage(cfg, subjects, labelmaps)
        geometric = run_geometry_stage(cfg, subjects, labelmaps, fields)
        table = feature_table(radiomic, geometric, subjects)
        provider = (FoldSafeGeometry(cfg, table, labelmaps, [s.labelmap for s in subjects])
                    if cfg.run.fold_safe else None)
        inputs = [os.path.join(cfg.paths.dir("features"), n) for n in ("radiomics.csv", "geometric.csv")]
        return run_classify_stage(cfg, table, inputs, provider)


def _quick_config(root, **run):
    """Small schedules for tests: two pyramid levels, few iterations, tiny MLP."""
    base = dict(executor="serial", folds=2, seeds=1, fold_safe=False, atlas_iterations=1)
    base.update(run)
    return PipelineConfig(
        paths=PathsConfig(images=str(root/"cohort"/"images"), labelmaps=str(root/"cohort"/"labelmaps"),
                          labels=str(root/"cohort"/"labels.csv"), out=str(root/"out")),
        radiomics=RadiomicsConfig(spacing=None),
        registration=RegistrationParams(levels=2, iterations=5),
        classifier=TrainConfig(epochs=100, hidden_layers=1, hidden_units=8, dropout=0.0, learning_rate=1e-2),
        run=RunConfig(**base))


def _small_cohort(root, n=3):
    from cardioradiomics.synthetic import SyntheticCohortSpec, generate_synthetic_cohort
    spec = SyntheticCohortSpec(n_healthy=n, n_diseased=n, dims=(16, 16, 16), spacing=(4.0, 4.0, 4.0),
                               anatomy=OrderedDict([(1, ((8.0, 8.0, 8.0), (4.0, 4.0, 5.0))),
                                                    (6, ((8.0, 8.0, 13.0), (1.5, 1.5, 1.5)))]),
                               dilation_width=3.0)
    generate_synthetic_cohort(spec, root/"cohort")


def test_config_from_ini(tmp_path):
    ini = tmp_path/"run.ini"
    ini.write_text("[paths]\nimages = imgs\nout = /tmp/x\n"
                   "[radiomics]\nbin_width = 10\nspacing = none\n"
                   "[classifier]\nepochs = 150\n"
                   "[run]\nselectors = radiomic, combined\nfold_safe = no\nworkers = 2\n")
    cfg = PipelineConfig.from_ini(ini)
    assert cfg.paths.images == str(tmp_path/"imgs") and cfg.paths.out == "/tmp/x"
    assert cfg.paths.dir("atlas") == os.path.join("/tmp/x", "atlas")
    assert cfg.radiomics.bin_width == 10.0 and cfg.radiomics.spacing is None
    assert cfg.classifier.epochs == 150 and cfg.registration == RegistrationParams()
    assert cfg.run.selectors == ("radiomic", "combined") and cfg.run.fold_safe is False
    over = cfg.with_overrides({"run": {"workers": 4, "seeds": None}, "geometry": {"n_svd": "2"}})
    assert over.run.workers == 4 and over.run.seeds == 3 and over.geometry.n_svd == 2
    assert over.train_config("radiomic").n_svd == 2 and over.train_config("radiomic").selector == "radiomic"


def test_bad_configs(tmp_path):
    import pytest
    for text in ["[run]\nfolds = five\n", "[run]\nspeed = 3\n", "[colour]\nx = 1\n",
                 "[classifier]\nselector = radiomic\n", "[classifier]\nepochs = 110\n",
                 "[geometry]\nn_svd = 4\n", "[geometry]\nspacing = -1\n", "[search]\nnested = sometimes\n",
                 "[run]\nexecutor = gpu\n", "[run]\nfold_safe = maybe\n"]:
        ini = tmp_path/"bad.ini"
        ini.write_text(text)
        with pytest.raises(ConfigError):
            PipelineConfig.from_ini(ini)
    with pytest.raises(IoError):
        PipelineConfig.from_ini(tmp_path/"missing.ini")


def test_missing_labelmap_names_the_subject(tmp_path):
    import pytest
    _small_cohort(tmp_path)
    os.remove(str(tmp_path/"cohort"/"labelmaps"/"sub-004.nii"))
    with pytest.raises(StageError) as info:
        run_pipeline(_quick_config(tmp_path))
    assert info.value.subject == "sub-004" and info.value.stage == "load"
    assert "sub-004" in str(info.value) and info.value.exit_code == 3


def test_pipeline_runs_and_resumes(tmp_path):
    _small_cohort(tmp_path)
    cfg = _quick_config(tmp_path)
    reports = run_pipeline(cfg)
    assert list(reports) == list(SELECTORS)
    out = tmp_path/"out"
    for name in ["features/radiomics.csv", "features/geometric.csv", "features/table.csv",
                 "atlas/atlas_labels.nii.gz", "atlas/atlas_soft.nii.gz", "fields/sub-000.nii.gz",
                 "reports/registration_qc.csv", "reports/cv_combined.csv", "reports/ablation.txt"]:
        assert (out/name).exists(), name
    assert len(reports["combined"].folds) == 2
    text = (out/"reports"/"ablation.txt").read_text()
    assert "87.50 ± 10.21" in text and "Radiomic + Geometric" in text

    before = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in out.rglob("*") if p.is_file()}
    again = run_pipeline(cfg)
    after = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in out.rglob("*") if p.is_file()}
    assert before == after
    for s in SELECTORS:
        assert again[s].mean == reports[s].mean


def test_fold_safe_atlas_ignores_test_subjects(tmp_path):
    from cardioradiomics.registration import Atlas
    _small_cohort(tmp_path)
    cfg = _quick_config(tmp_path)
    subjects = discover_subjects(cfg.paths)
    labelmaps = load_labelmaps(subjects)
    table = FeatureTable([s.subject_id for s in subjects], ["LV_geom_sv1", "LV_firstorder_Mean"],
                         np.zeros((6, 2)), [s.label for s in subjects])
    inputs = [s.labelmap for s in subjects]
    provider = FoldSafeGeometry(cfg, table, labelmaps, inputs)
    train = ["sub-000", "sub-001", "sub-003"]
    key, healthy = provider.key(train)
    assert healthy == ["sub-000", "sub-001"]
    assert provider.key(["sub-003", "sub-001", "sub-000", "sub-005"])[0] == key

    atlas, fields = atlas_and_fields(labelmaps, healthy, cfg.registration, 1)
    assert isinstance(atlas, Atlas) and atlas.cohort_size == 2
    assert list(fields) == [s.subject_id for s in subjects]

    # replace a healthy test-only subject: the fold atlas must not move
    swapped = OrderedDict(labelmaps)
    swapped["sub-002"] = labelmaps["sub-004"]
    other, _ = atlas_and_fields(swapped, healthy, cfg.registration, 1)
    assert np.array_equal(atlas.soft.data, other.soft.data)

    tr, te = provider(0, 0, train, ["sub-002", "sub-004", "sub-005"])
    assert tr.subject_ids == tuple(train) and te.subject_ids == ("sub-002", "sub-004", "sub-005")
    assert np.all(tr.X[:, 1] == 0.0) and np.isfinite(tr.X[:, 0]).all()
    folds = tmp_path/"out"/"folds"
    assert [p.name for p in folds.iterdir()] == [key]

    # a cached fold atlas older than its labelmaps is rebuilt
    out = folds/key/"geometric.csv"
    os.utime(str(out), (1000.0, 1000.0))
    FoldSafeGeometry(cfg, table, labelmaps, inputs).features(train)
    assert out.stat().st_mtime > 1000.0
    os.utime(str(out), (1000.0, 1000.0))
    FoldSafeGeometry(cfg, table, labelmaps, []).features(train)
    assert out.stat().st_mtime == 1000.0


def test_mixed_spacing_cohort_shares_one_lattice(tmp_path):
    from cardioradiomics.io.nifti import save_volume
    from cardioradiomics.volume import resample_to_spacing
    _small_cohort(tmp_path)
    cohort = tmp_path/"cohort"
    for sub in ("images", "labelmaps"):
        path = cohort/sub/"sub-001.nii"
        loader = load_volume if sub == "images" else load_labelmap
        save_volume(resample_to_spacing(loader(path), (2.0, 2.0, 2.0)), path)
    cfg = _quick_config(tmp_path)
    subjects = discover_subjects(cfg.paths)
    labelmaps = load_labelmaps(subjects)
    assert len({l.geometry for l in labelmaps.values()}) == 1
    assert labelmaps["sub-000"].geometry == ((32, 32, 32), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
    coarse = load_labelmaps(subjects, spacing=4.0)
    assert {l.dims for l in coarse.values()} == {(16, 16, 16)}

    reports = run_pipeline(cfg)
    assert list(reports) == list(SELECTORS)
    assert load_field(tmp_path/"out"/"fields"/"sub-001.nii.gz").dims == (32, 32, 32)


def test_fresh_run_orders_feature_sets(tmp_path):
    from cardioradiomics.synthetic import SyntheticCohortSpec, generate_synthetic_cohort
    generate_synthetic_cohort(SyntheticCohortSpec(n_healthy=10, n_diseased=10, dilation_mm=4.0),
                              tmp_path/"cohort")
    cfg = dataclasses.replace(
        _quick_config(tmp_path, fold_safe=True),
        radiomics=RadiomicsConfig(spacing=2.0),
        registration=RegistrationParams(levels=2, iterations=20),
        classifier=TrainConfig(epochs=200, hidden_layers=1, hidden_units=32, dropout=0.0, learning_rate=1e-2))
    assert not (tmp_path/"out").exists()
    reports = run_pipeline(cfg)
    combined = reports["combined"].mean["accuracy"]
    single = max(reports["radiomic"].mean["accuracy"], reports["geometric"].mean["accuracy"])
    assert combined >= single - 2.0 and combined >= 85.0
    assert (tmp_path/"out"/"reports"/"ablation.txt").exists()
