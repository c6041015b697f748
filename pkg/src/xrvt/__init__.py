"""Miniature numpy deep-learning library and image-classification pipeline.

Hot kernels run under numba when available; set ``XRVT_DISABLE_NUMBA=1`` to
force the pure-numpy path.
"""
from .errors import (ConfigError, ContractError, DataError, DivergedError, FormatError, ShapeError,
                     XrvtError)
from .tensor import Tensor, backward, create, grad_check, no_grad
from .models import ModelSpec, ModelState, build, forward, freeze, freeze_except, predict
from .augment import AugmentPlan, augment_dataset
from .dataset import Dataset, LabeledImage, ingest, load_manifest, stratified_kfold, stratified_split
from .train import TrainConfig, cross_validate, train_loop
from .metrics import EvalReport, confusion_matrix, report
from .baselines import KnnConfig, KNNClassifier, MajorityClassifier, knn_predict, majority_classifier

__version__ = "0.1.0"

__all__ = [
    "AugmentPlan", "ConfigError", "ContractError", "DataError", "Dataset", "DivergedError",
    "EvalReport", "FormatError", "KNNClassifier", "KnnConfig", "LabeledImage", "MajorityClassifier",
    "ModelSpec", "ModelState", "ShapeError", "Tensor", "TrainConfig", "XrvtError", "augment_dataset",
    "backward", "build", "confusion_matrix", "create", "cross_validate", "forward", "freeze",
    "freeze_except", "grad_check", "ingest", "knn_predict", "load_manifest", "majority_classifier",
    "no_grad", "predict", "report", "stratified_kfold", "stratified_split", "train_loop",
]
