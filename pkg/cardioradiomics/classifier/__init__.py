from cardioradiomics.classifier.evaluation import (METRICS, EvalReport, Metrics, classification_metrics,
                                                  cross_validate, format_table, write_report)
from cardioradiomics.classifier.mlp import AdamW, MlpModel, TrainConfig, predict, train
from cardioradiomics.classifier.search import NestedSearch, SearchSpace, hyperparameter_search, write_trials
from cardioradiomics.classifier.table import (SELECTORS, FeatureTable, Scaler, read_table, select_columns,
                                              standardize, write_table)
