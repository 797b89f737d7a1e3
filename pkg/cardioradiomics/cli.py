"""Command line entry point: ``cardioradiomics <command> [options]``.

Every command accepts ``--config`` (an INI file read into PipelineConfig) and
flags overriding individual keys. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""
import argparse
import logging
import os
import sys
from collections import OrderedDict

import numpy as np
import pandas as pd

from cardioradiomics.errors import CardioError, ConfigError

log = logging.getLogger("cardioradiomics")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _stem(path):
    name = os.path.basename(str(path))
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[:-len(ext)]
    return name


def _load_config(args):
    from cardioradiomics.pipeline import PipelineConfig
    overrides = {
        "paths": {"images": args.images, "labelmaps": args.labelmaps, "labels": args.labels, "out": args.work},
        "run": {"workers": args.workers, "executor": args.executor, "fold_safe": args.fold_safe,
                "folds": args.folds, "seeds": args.seeds,
                "selectors": (args.selector,) if args.selector else None},
        "geometry": {"n_svd": args.n_svd},
        "search": {"budget": args.budget, "strategy": args.strategy,
                   "enabled": True if args.budget is not None else None},
    }
    if args.config:
        return PipelineConfig.from_ini(args.config, overrides)
    return PipelineConfig().with_overrides(overrides)


def cmd_gen_synth(args, cfg):
    from cardioradiomics.synthetic import SyntheticCohortSpec, generate_synthetic_cohort, scaled_anatomy
    spec = SyntheticCohortSpec(n_healthy=args.n_healthy, n_diseased=args.n_diseased,
                               dims=(args.dims,)*3, spacing=(args.spacing,)*3, seed=args.seed,
                               anatomy=scaled_anatomy((args.dims,)*3))
    generate_synthetic_cohort(spec, args.out)


def cmd_build_atlas(args, cfg):
    from cardioradiomics import workers
    from cardioradiomics.pipeline import discover_subjects, load_labelmaps, run_atlas_stage
    with workers.use(cfg.run.executor, cfg.run.workers or None):
        subjects = discover_subjects(cfg.paths, images=False)
        run_atlas_stage(cfg, subjects, load_labelmaps(subjects, cfg.geometry.spacing))
    print(cfg.paths.dir("atlas"))


def cmd_register(args, cfg):
    from cardioradiomics.io.nifti import load_labelmap
    from cardioradiomics.registration import load_atlas, register, registration_qc, save_field, to_soft_labels
    atlas = load_atlas(args.atlas)
    moving = load_labelmap(args.moving)
    f = register(to_soft_labels(moving, cfg.registration.label_sigma_mm), atlas.soft, cfg.registration)
    save_field(f, args.out)
    print(registration_qc([_stem(args.moving)], [f]).to_string(index=False))


def cmd_radiomics(args, cfg):
    from cardioradiomics import workers
    from cardioradiomics.io.tables import write_features
    if args.image is None:
        from cardioradiomics.pipeline import discover_subjects, run_radiomics_stage
        with workers.use(cfg.run.executor, cfg.run.workers or None):
            run_radiomics_stage(cfg, discover_subjects(cfg.paths))
        return
    from cardioradiomics.io.nifti import load_labelmap, load_volume
    from cardioradiomics.radiomics import extract_radiomics
    if args.labelmap is None or args.out is None:
        raise ConfigError("--image needs --labelmap and --out")
    vector = extract_radiomics(load_volume(args.image), load_labelmap(args.labelmap), cfg.radiomics)
    write_features([(args.subject_id or _stem(args.image), vector)], args.out)


def cmd_geomfeat(args, cfg):
    from cardioradiomics.geometry import extract_geometric
    from cardioradiomics.io.nifti import load_labelmap
    from cardioradiomics.io.tables import write_features
    from cardioradiomics.registration import load_field
    vector = extract_geometric(load_field(args.field), load_labelmap(args.labelmap), cfg.geometry.n_svd,
                               cfg.geometry.center)
    write_features([(args.subject_id or _stem(args.labelmap), vector)], args.out)


def cmd_seg_metrics(args, cfg):
    from cardioradiomics.io.nifti import load_labelmap
    from cardioradiomics.segmetrics import evaluate_segmentation, write_segmetrics
    report = evaluate_segmentation(load_labelmap(args.pred), load_labelmap(args.gt))
    write_segmetrics(report, args.out)
    print(report.to_frame().to_string(index=False))


def _selected_table(args, cfg):
    from cardioradiomics.classifier import read_table
    selector = args.selector or "combined"
    return read_table(args.table), cfg.train_config(selector)


def cmd_train(args, cfg):
    from cardioradiomics.classifier import MlpModel, classification_metrics, predict, standardize, train
    from cardioradiomics.io.tables import write_csv
    table, train_cfg = _selected_table(args, cfg)
    table = table.select(train_cfg.selector, train_cfg.n_svd)
    scaled, scaler = standardize(table, table)
    model = MlpModel.create(len(table.columns), train_cfg.hidden_layers, train_cfg.hidden_units,
                            train_cfg.dropout, seed=train_cfg.seed)
    model, losses = train(model, scaled, train_cfg)
    model.save(args.model)
    write_csv(pd.DataFrame({"column": list(scaler.columns), "mean": scaler.mean, "std": scaler.std}),
              args.model + ".scaler.csv")
    metrics = classification_metrics(predict(model, scaled)[1], table.labels)
    log.info("final training loss %.4f", losses[-1] if len(losses) else float("nan"))
    print("training set: " + ", ".join("{} {:.2f}".format(k, v) for k, v in metrics.as_dict().items()))


def cmd_cv(args, cfg):
    from cardioradiomics.classifier import cross_validate, format_table, write_report
    from cardioradiomics.pipeline import TITLES
    table, train_cfg = _selected_table(args, cfg)
    report = cross_validate(table, train_cfg, cfg.run.folds, cfg.run.seeds)
    if args.out:
        write_report(report, args.out)
    print(format_table(OrderedDict([(TITLES[train_cfg.selector], report)])), end="")


def cmd_search(args, cfg):
    from cardioradiomics.classifier import hyperparameter_search, write_trials
    table, train_cfg = _selected_table(args, cfg)
    best, trials = hyperparameter_search(table, cfg.search.budget, base=train_cfg, strategy=cfg.search.strategy,
                                         folds=cfg.search.folds, seeds=cfg.search.seeds, seed=cfg.search.seed)
    if args.out:
        write_trials(trials, args.out)
    for key in ("learning_rate", "epochs", "hidden_layers", "hidden_units", "dropout", "n_svd"):
        print("{} = {}".format(key, getattr(best, key)))


def cmd_run_all(args, cfg):
    from cardioradiomics.pipeline import ablation_text, run_pipeline
    reports = run_pipeline(cfg)
    print(ablation_text(reports, cfg.run.folds, cfg.run.seeds), end="")


COMMANDS = OrderedDict([
    ("gen-synth", cmd_gen_synth),
    ("build-atlas", cmd_build_atlas),
    ("register", cmd_register),
    ("radiomics", cmd_radiomics),
    ("geomfeat", cmd_geomfeat),
    ("seg-metrics", cmd_seg_metrics),
    ("train", cmd_train),
    ("cv", cmd_cv),
    ("search", cmd_search),
    ("run-all", cmd_run_all),
])


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [paths], [radiomics], ... sections")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--images")
    common.add_argument("--labelmaps")
    common.add_argument("--labels", help="CSV with subject_id,label")
    common.add_argument("--work", help="output root for pipeline stages")
    common.add_argument("--workers", type=int)
    common.add_argument("--executor", choices=["serial", "thread", "process"])
    common.add_argument("--fold-safe", dest="fold_safe", action="store_true", default=None)
    common.add_argument("--no-fold-safe", dest="fold_safe", action="store_false")
    common.add_argument("--selector", choices=["radiomic", "geometric", "combined"])
    common.add_argument("--folds", type=int)
    common.add_argument("--seeds", type=int)
    common.add_argument("--n-svd", dest="n_svd", type=int)
    common.add_argument("--budget", type=int, help="enables hyperparameter search with this many trials")
    common.add_argument("--strategy", choices=["random", "halving"])

    parser = argparse.ArgumentParser(prog="cardioradiomics",
                                     description="Radiomic and deformation features for CVD classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-healthy", type=int, default=20)
    p.add_argument("--n-diseased", type=int, default=20)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("build-atlas", parents=[common], help="atlas from the healthy subjects of --labels")

    p = sub.add_parser("register", parents=[common], help="register one labelmap to an atlas")
    p.add_argument("--moving", required=True)
    p.add_argument("--atlas", required=True, help="directory written by build-atlas")
    p.add_argument("--out", required=True)

    p = sub.add_parser("radiomics", parents=[common], help="radiomic features of one subject or the cohort")
    p.add_argument("--image")
    p.add_argument("--labelmap")
    p.add_argument("--subject-id")
    p.add_argument("--out")

    p = sub.add_parser("geomfeat", parents=[common], help="deformation features of one subject")
    p.add_argument("--field", required=True)
    p.add_argument("--labelmap", required=True)
    p.add_argument("--subject-id")
    p.add_argument("--out", required=True)

    p = sub.add_parser("seg-metrics", parents=[common], help="compare a predicted labelmap to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)

    for name, text in [("train", "train one MLP on a feature table"),
                       ("cv", "cross-validate on a feature table"),
                       ("search", "hyperparameter search on a feature table")]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--table", required=True)
        if name == "train":
            p.add_argument("--model", required=True, help="output .npz")
        else:
            p.add_argument("--out")

    sub.add_parser("run-all", parents=[common], help="every stage, then the feature-set ablation")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except CardioError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


def test_gen_synth_and_seg_metrics(tmp_path, capsys):
    out = tmp_path/"cohort"
    assert main(["gen-synth", "--out", str(out), "--n-healthy", "1", "--n-diseased", "1", "--dims", "16",
                 "--spacing", "4"]) == 0
    assert sorted(p.name for p in (out/"labelmaps").iterdir()) == ["sub-000.nii", "sub-001.nii"]
    gt = str(out/"labelmaps"/"sub-000.nii")
    assert main(["seg-metrics", "--pred", gt, "--gt", gt, "--out", str(tmp_path/"seg.csv")]) == 0
    frame = pd.read_csv(tmp_path/"seg.csv")
    assert frame.iloc[-1]["structure"] == "global" and frame.iloc[-1]["dsc"] == 1.0


def test_exit_codes(tmp_path):
    assert main(["seg-metrics", "--pred", str(tmp_path/"no.nii"), "--gt", str(tmp_path/"no.nii"),
                 "--out", str(tmp_path/"x.csv")]) == 3
    assert main(["cv", "--table", str(tmp_path/"t.csv"), "--folds", "1"]) == 2
    ini = tmp_path/"bad.ini"
    ini.write_text("[radiomics]\nbin_width = 0\n")
    assert main(["cv", "--config", str(ini), "--table", str(tmp_path/"t.csv")]) == 2


def test_cv_command(tmp_path, capsys):
    from cardioradiomics.classifier import FeatureTable, write_table
    rng = np.random.default_rng(0)
    labels = np.arange(12) % 2
    X = rng.normal(0, 0.5, size=(12, 2)) + np.where(labels[:, None] == 1, 2.0, -2.0)
    write_table(FeatureTable(["s{}".format(i) for i in range(12)], ["LV_firstorder_Mean", "LV_geom_sv1"],
                             X, labels), tmp_path/"t.csv")
    code = main(["cv", "--table", str(tmp_path/"t.csv"), "--folds", "3", "--seeds", "1",
                 "--selector", "geometric", "--out", str(tmp_path/"cv.csv")])
    assert code == 0
    assert "Geometric only" in capsys.readouterr().out
    assert len(pd.read_csv(tmp_path/"cv.csv")) == 3
