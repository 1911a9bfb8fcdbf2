"""
Downstream Classification
=========================

Logistic regression on frozen embeddings and the evaluation metrics
(binary accuracy, support-weighted F1).

One binary model per task: a single head for sentiment, four one-vs-all heads
for the emotion flags. The solver is deterministic full-batch gradient descent
with backtracking line search on standardized features; the fitted weights are
folded back so predictions apply directly to raw embeddings.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from mlrep.config import (
    DECISION_THRESHOLD,
    LOGREG_C,
    LOGREG_MAX_ITER,
    LOGREG_TOL,
    SENTIMENT_TASK,
)
from mlrep.errors import ConfigError, EvaluationError, ShapeError, SingleClassError, WeightsFormatError

logger = logging.getLogger(__name__)


# ==============================================================================
# LABELS
# ==============================================================================

@dataclass(frozen=True)
class LabelRule:
    """
    How raw labels become binary targets

    Sentiment is positive iff score > 0 (>= 0 with nonnegative_positive);
    exclude_neutral drops score == 0 from training and evaluation.
    Emotion flags are positive iff the flag is set.
    """
    nonnegative_positive: bool = False
    exclude_neutral: bool = False


def binary_labels(labels: Mapping[str, np.ndarray], rule: LabelRule = LabelRule()) -> Dict[str, np.ndarray]:
    binary = {}
    for task, values in labels.items():
        values = np.asarray(values, dtype=np.float64)
        if task == SENTIMENT_TASK:
            positive = values >= 0 if rule.nonnegative_positive else values > 0
        else:
            positive = values > 0.5
        binary[task] = positive.astype(np.int64)
    return binary


def evaluation_mask(labels: Mapping[str, np.ndarray], rule: LabelRule = LabelRule()) -> np.ndarray:
    """Utterances that take part in training and scoring"""
    count = len(next(iter(labels.values()))) if labels else 0
    mask = np.ones(count, dtype=bool)
    if rule.exclude_neutral and SENTIMENT_TASK in labels:
        mask &= np.asarray(labels[SENTIMENT_TASK]) != 0
    return mask


# ==============================================================================
# LOGISTIC REGRESSION
# ==============================================================================

@dataclass(frozen=True)
class LogRegConfig:
    """l2 is the inverse regularization strength (larger = weaker penalty)"""
    l2: float = LOGREG_C
    max_iter: int = LOGREG_MAX_ITER
    tol: float = LOGREG_TOL

    def __post_init__(self):
        if self.l2 <= 0 or self.max_iter < 1 or self.tol <= 0:
            raise ConfigError(f"Invalid logistic regression config {self}")


@dataclass
class BinaryLogReg:
    task: str
    weights: np.ndarray
    bias: float
    converged: bool = True
    iterations: int = 0
    grad_norm: float = 0.0
    loss_history: List[float] = field(default_factory=list)

    @property
    def parameter_count(self) -> int:
        return len(self.weights) + 1


@dataclass
class LogRegModel:
    tasks: Dict[str, BinaryLogReg]
    config: LogRegConfig = LogRegConfig()
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return len(next(iter(self.tasks.values())).weights)

    @property
    def parameter_count(self) -> int:
        return sum(head.parameter_count for head in self.tasks.values())


def logistic_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                       l2: float = LOGREG_C, penalty: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray, float]:
    """
    Mean regularized negative log-likelihood and its gradient

    J = (sum(log(1 + e^z) - y z) + sum(penalty * w^2) / (2 l2)) / B with
    z = X w + b; penalty defaults to ones and the bias is not penalized.

    Returns:
        (J, dJ/dw, dJ/db)
    """
    count = len(y)
    z = X @ w + b
    shrink = w if penalty is None else penalty * w
    loss = (np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.dot(w, shrink) / l2) / count
    residual = expit(z) - y
    return float(loss), (X.T @ residual + shrink / l2) / count, float(np.sum(residual) / count)


def train_logreg(embeddings: np.ndarray, labels: np.ndarray, config: LogRegConfig = LogRegConfig(),
                 task: str = SENTIMENT_TASK) -> BinaryLogReg:
    """
    Fit one binary logistic regression

    Args:
        embeddings: Tensor [B, K]
        labels: Binary vector of length B
        config: Regularization and stopping criteria
        task: Name used in errors and logs

    Returns:
        BinaryLogReg whose weights apply to the raw embeddings

    The penalty is on the raw weights. Descent runs on centered columns
    divided by sqrt(var + 1 / (l2 B)), with the penalty rescaled to match, so
    every coordinate has curvature of order one and constant columns stay
    finite.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"Task '{task}': embeddings {X.shape} do not match {len(y)} labels")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise SingleClassError(task)

    mean = X.mean(axis=0)
    scale = np.sqrt(X.var(axis=0) + 1.0 / (config.l2 * len(y)))
    penalty = 1.0 / scale ** 2
    Z = (X - mean) / scale

    w, b = np.zeros(Z.shape[1]), 0.0
    loss, grad_w, grad_b = logistic_objective(w, b, Z, y, config.l2, penalty)
    history, step, iterations = [loss], 1.0, 0
    grad_norm = float(np.sqrt(np.dot(grad_w, grad_w) + grad_b * grad_b))

    while grad_norm >= config.tol and iterations < config.max_iter:
        step *= 2.0
        squared = grad_norm * grad_norm
        while True:
            candidate_w, candidate_b = w - step * grad_w, b - step * grad_b
            candidate_loss, candidate_gw, candidate_gb = logistic_objective(candidate_w, candidate_b, Z, y, config.l2, penalty)
            if candidate_loss <= loss - 0.5 * step * squared or step < 1e-12:
                break
            step *= 0.5
        if candidate_loss > loss:
            break
        w, b, loss, grad_w, grad_b = candidate_w, candidate_b, candidate_loss, candidate_gw, candidate_gb
        grad_norm = float(np.sqrt(np.dot(grad_w, grad_w) + grad_b * grad_b))
        history.append(loss)
        iterations += 1

    converged = grad_norm < config.tol
    if not converged:
        logger.warning(f"Task '{task}': stopped after {iterations} iterations, gradient norm {grad_norm:.2e}")
    weights = w / scale
    return BinaryLogReg(task=task, weights=weights, bias=float(b - np.dot(weights, mean)),
                        converged=converged, iterations=iterations, grad_norm=grad_norm, loss_history=history)


def train_one_vs_all(embeddings: np.ndarray, multi_labels: Mapping[str, np.ndarray],
                     config: LogRegConfig = LogRegConfig()) -> LogRegModel:
    """
    Independent binary model per label column

    A column with a single class is reported in model.failures; the other
    columns are still trained.
    """
    tasks, failures = {}, {}
    for task, labels in multi_labels.items():
        try:
            tasks[task] = train_logreg(embeddings, labels, config, task=task)
            logger.info(f"✓ Trained '{task}' ({tasks[task].iterations} iterations)")
        except SingleClassError as e:
            failures[task] = str(e)
            logger.error(f"✗ {e}")
    return LogRegModel(tasks=tasks, config=config, failures=failures)


@dataclass(frozen=True)
class TaskPrediction:
    probabilities: np.ndarray
    predictions: np.ndarray


def predict(model: LogRegModel, embeddings: np.ndarray,
            threshold: float = DECISION_THRESHOLD) -> Dict[str, TaskPrediction]:
    X = np.asarray(embeddings, dtype=np.float64)
    results = {}
    for task, head in model.tasks.items():
        if X.ndim != 2 or X.shape[1] != len(head.weights):
            raise ShapeError(f"Task '{task}' expects {len(head.weights)}-d embeddings, got {X.shape}")
        probabilities = expit(X @ head.weights + head.bias)
        results[task] = TaskPrediction(probabilities, (probabilities >= threshold).astype(np.int64))
    return results


# ==============================================================================
# METRICS
# ==============================================================================

def _check_pair(preds, labels) -> Tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds).astype(np.int64), np.asarray(labels).astype(np.int64)
    if len(preds) == 0 or len(preds) != len(labels):
        raise EvaluationError(f"Need equal-length, non-empty predictions and labels (got {len(preds)} / {len(labels)})")
    return preds, labels


def binary_accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(accuracy_score(labels, preds))


def weighted_f1(preds, labels) -> float:
    """Per-class F1 averaged with true-label support weights; undefined F1 counts as 0"""
    preds, labels = _check_pair(preds, labels)
    return float(f1_score(labels, preds, labels=[0, 1], average='weighted', zero_division=0))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(preds, labels) -> ConfusionCounts:
    preds, labels = _check_pair(preds, labels)
    tn, fp, fn, tp = confusion_matrix(labels, preds, labels=[0, 1]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    accuracy: float
    weighted_f1: float
    confusion: ConfusionCounts


@dataclass(frozen=True)
class MetricsReport:
    tasks: Dict[str, TaskMetrics]
    n_evaluated: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([m.accuracy for m in self.tasks.values()]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([m.weighted_f1 for m in self.tasks.values()]))

    def rows(self) -> List[Dict[str, float]]:
        return [{
            'task': m.task, 'acc2': m.accuracy, 'f1': m.weighted_f1,
            'tp': m.confusion.tp, 'fp': m.confusion.fp, 'fn': m.confusion.fn, 'tn': m.confusion.tn,
            'n': m.confusion.total,
        } for m in self.tasks.values()]


def evaluate(model: LogRegModel, embeddings: np.ndarray, labels: Mapping[str, np.ndarray],
             threshold: float = DECISION_THRESHOLD) -> MetricsReport:
    """
    Score every trained task

    Args:
        labels: Binary targets per task (already masked like embeddings)
    """
    if not model.tasks:
        raise EvaluationError("Classifier has no trained tasks")
    predictions = predict(model, embeddings, threshold)
    tasks = {}
    for task, prediction in predictions.items():
        if task not in labels:
            raise EvaluationError(f"No labels for task '{task}'")
        tasks[task] = TaskMetrics(
            task=task,
            accuracy=binary_accuracy(prediction.predictions, labels[task]),
            weighted_f1=weighted_f1(prediction.predictions, labels[task]),
            confusion=confusion_counts(prediction.predictions, labels[task]),
        )
        logger.info(f"{task}: Acc2 {tasks[task].accuracy:.4f}, F1 {tasks[task].weighted_f1:.4f}")
    return MetricsReport(tasks=tasks, n_evaluated=len(np.asarray(embeddings)))


# ==============================================================================
# PERSISTENCE
# ==============================================================================

def classifier_tensors(model: LogRegModel, rule: LabelRule = LabelRule()) -> Dict[str, np.ndarray]:
    """Named tensors appended to an MLRW container"""
    tensors = {}
    for task, head in model.tasks.items():
        tensors[f"task/{task}/w"] = head.weights
        tensors[f"task/{task}/b"] = np.array([head.bias])
    tensors['meta/label_rule/nonnegative_positive'] = np.array([int(rule.nonnegative_positive)])
    tensors['meta/label_rule/exclude_neutral'] = np.array([int(rule.exclude_neutral)])
    tensors['meta/logreg/l2'] = np.array([model.config.l2])
    return tensors


def load_classifier(tensors: Mapping[str, np.ndarray]) -> Tuple[LogRegModel, LabelRule]:
    heads = {}
    for key, value in tensors.items():
        if key.startswith('task/') and key.endswith('/w'):
            task = key[len('task/'):-len('/w')]
            bias_key = f"task/{task}/b"
            if bias_key not in tensors:
                raise WeightsFormatError(f"Classifier tensor '{bias_key}' missing")
            heads[task] = BinaryLogReg(task=task, weights=value.astype(np.float64),
                                       bias=float(tensors[bias_key][0]))
    if not heads:
        raise WeightsFormatError("Container holds no classifier tensors")
    rule = LabelRule(
        nonnegative_positive=bool(tensors.get('meta/label_rule/nonnegative_positive', [0])[0]),
        exclude_neutral=bool(tensors.get('meta/label_rule/exclude_neutral', [0])[0]),
    )
    l2 = float(tensors['meta/logreg/l2'][0]) if 'meta/logreg/l2' in tensors else LOGREG_C
    return LogRegModel(tasks=heads, config=LogRegConfig(l2=l2)), rule
