"""Source-free adaptation: pseudo-labels, memory-bank class weights, fine-tuning.

The adaptation entry point never sees source data; it takes a trained model
and unlabeled target features. Ground-truth target labels may be passed for
reporting only and are never used to build a loss.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from fuzzyadapt import losses
from fuzzyadapt.errors import InvalidInputError
from fuzzyadapt.mathcore import check_probs, make_rng
from fuzzyadapt.nn import TrainConfig, make_optimizer, predict_all, sgd_epoch
from fuzzyadapt.util import atomic_write_text

log = logging.getLogger(__name__)

# adaptation objectives: name -> (loss id, accepts gradient mode)
OBJECTIVES = {
    "fal": ("fal", True),
    "fal_term1": ("fal_term1", True),
    "fal_term2": ("fal_term2", True),
    "ce": ("ce", False),
    "focal": ("focal", False),
    "rce": ("rce", False),
    "sce": ("sce", False),
    "gce": ("gce", False),
}


def pseudo_label(p):
    """Argmax class of each probability vector; ties go to the lowest index."""
    p = check_probs(p)
    out = np.argmax(p, axis=-1)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


@dataclass
class MemoryBank:
    predictions: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.int64)
        if self.predictions.ndim != 1 or self.predictions.size == 0:
            raise InvalidInputError("memory bank needs a nonempty 1-D prediction array")
        if np.any(self.predictions < 0) or np.any(self.predictions >= self.n_classes):
            raise InvalidInputError(f"predictions must lie in [0, {self.n_classes})")

    @property
    def counts(self):
        return np.bincount(self.predictions, minlength=self.n_classes)

    @property
    def mean_count(self):
        return self.counts.sum() / self.n_classes

    @classmethod
    def from_counts(cls, counts):
        """Bank whose predictions realise the given per-class counts."""
        counts = np.asarray(counts, dtype=np.int64)
        return cls(np.repeat(np.arange(counts.size), counts), counts.size)


def build_memory_bank(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("target data must be a nonempty (N, dim) array")
    return MemoryBank(pseudo_label(predict_all(model, X)), model.arch.n_classes)


def class_weights(bank):
    """w_i = M / max(n_i, 1) with M the mean class count."""
    counts = bank.counts
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        log.warning("zero-count guard engaged for classes %s", empty.tolist())
    return bank.mean_count / np.maximum(counts, 1)


@dataclass(frozen=True)
class AdaptConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: int = 5
    objective: str = "fal"
    use_weights: bool = True
    refresh_per_epoch: bool = True
    gradient_mode: str = "through"
    freeze_classifier: bool = False
    loss_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"unknown objective {self.objective!r}; choose from {sorted(OBJECTIVES)}")
        if self.gradient_mode not in losses.MODES:
            raise InvalidInputError(f"gradient_mode must be one of {losses.MODES}")
        if self.use_weights and self.objective != "fal":
            raise InvalidInputError("memory-bank weights are defined for the fal objective only")


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(y_true, y_pred, k):
    C = np.zeros((k, k), dtype=np.int64)
    np.add.at(C, (y_true, y_pred), 1)
    return C


def metrics_from_confusion(C):
    rows = C.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(C) / np.maximum(rows, 1), np.nan)
    return Metrics(float(np.trace(C) / C.sum()), per_class, C)


def evaluate(model, X, y):
    y = np.asarray(y, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("evaluation needs a nonempty labelled dataset")
    k = model.arch.n_classes
    if y.shape != (X.shape[0],) or np.any(y < 0) or np.any(y >= k):
        raise InvalidInputError(f"labels must be one per sample, in [0, {k})")
    pred = pseudo_label(predict_all(model, X))
    return metrics_from_confusion(confusion_matrix(y, pred, k))


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    class_counts: list
    weights: list
    pseudo_label_accuracy: float = None


@dataclass
class AdaptReport:
    objective: str
    epochs: list = field(default_factory=list)
    pre_metrics: Metrics = None
    post_metrics: Metrics = None

    @property
    def pre_accuracy(self):
        return None if self.pre_metrics is None else self.pre_metrics.accuracy

    @property
    def post_accuracy(self):
        return None if self.post_metrics is None else self.post_metrics.accuracy

    def as_dict(self):
        return {
            "objective": self.objective,
            "pre": None if self.pre_metrics is None else self.pre_metrics.as_dict(),
            "post": None if self.post_metrics is None else self.post_metrics.as_dict(),
            "epochs": [asdict(e) for e in self.epochs],
        }

    def save(self, path):
        atomic_write_text(path, json.dumps(self.as_dict(), indent=2))


def _objective_fn(cfg):
    loss_id, has_mode = OBJECTIVES[cfg.objective]
    fn = losses.get_loss(loss_id)
    params = dict(cfg.loss_params)
    if has_mode:
        params["mode"] = cfg.gradient_mode
    state = {"weights": None}

    if cfg.objective == "fal" and cfg.use_weights:

        def loss_fn(P, Y):
            return losses.weighted_fal_loss(P, Y, state["weights"], **params)

    else:

        def loss_fn(P, Y):
            return fn(P, Y, **params)

    return loss_fn, state


def adapt(source_model, X_target, cfg, y_true=None):
    """Fine-tune a copy of ``source_model`` on unlabeled target features.

    Each epoch (or only the first, without ``refresh_per_epoch``) re-runs
    inference on the whole target set to rebuild pseudo-labels and the memory
    bank, then makes one shuffled minibatch SGD pass. ``y_true`` only feeds
    the per-epoch pseudo-label accuracy and the pre/post accuracies.
    """
    X = np.asarray(X_target, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("target data must be a nonempty (N, dim) array")
    if y_true is not None:
        y_true = np.asarray(y_true, dtype=np.int64).copy()
        y_true.setflags(write=False)

    model = source_model.copy()
    opt = make_optimizer(model, cfg.train, freeze_head=cfg.freeze_classifier)
    rng = make_rng(cfg.train.seed)
    loss_fn, state = _objective_fn(cfg)
    report = AdaptReport(cfg.objective)
    if y_true is not None:
        report.pre_metrics = evaluate(model, X, y_true)

    labels = None
    for epoch in range(cfg.epochs):
        if labels is None or cfg.refresh_per_epoch:
            bank = build_memory_bank(model, X)
            labels = bank.predictions.copy()
            labels.setflags(write=False)
            state["weights"] = class_weights(bank)
        mean_loss = sgd_epoch(model, opt, X, labels, loss_fn, cfg.train.batch_size, rng, epoch)
        report.epochs.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=mean_loss,
                class_counts=bank.counts.tolist(),
                weights=state["weights"].tolist(),
                pseudo_label_accuracy=None if y_true is None else float(np.mean(labels == y_true)),
            )
        )
    if y_true is not None:
        report.post_metrics = evaluate(model, X, y_true)
    return model, report
