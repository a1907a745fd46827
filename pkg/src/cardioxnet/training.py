"""Loss, Adam, dataset splitting, training loop and classification metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as kv
from .errors import ConfigError, DataError, NumericalError
from .layers import INFER, TRAIN
from .model import Model, ModelConfig, build_model
from .signal import Dataset

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    patience: int = 20
    freeze_batchnorm: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        return self

    def to_kv(self) -> dict[str, str]:
        return kv.to_kv(self)

    @classmethod
    def from_kv(cls, items, base=None) -> "TrainConfig":
        return kv.from_kv(cls, items, base)


# --------------------------------------------------------------------------
# loss

def sparse_ce_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, log clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} disagree")
    K = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def softmax_ce_grad(probs: np.ndarray, labels) -> np.ndarray:
    """d(loss)/d(logits) for softmax followed by sparse CE: ``(p - onehot) / B``."""
    g = np.array(probs, dtype=np.float64)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --------------------------------------------------------------------------
# splitting

def split_dataset(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Stratified train/val/test split; rounding remainders go to train."""
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for k, name in enumerate(dataset.class_names):
        idx = np.flatnonzero(labels == k)
        if len(idx) < 3:
            raise DataError(f"class {name!r} has {len(idx)} samples; at least 3 are needed to stratify")
        idx = rng.permutation(idx)
        n_val = int(math.floor(fractions[1] * len(idx) + 1e-9))
        n_test = int(math.floor(fractions[2] * len(idx) + 1e-9))
        n_train = len(idx) - n_val - n_test
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(dataset.subset(sorted(p)) for p in parts)


@dataclass
class FoldPlan:
    folds: list[np.ndarray]
    histograms: list[dict[str, int]]

    @property
    def k(self) -> int:
        return len(self.folds)


def stratified_kfold(dataset: Dataset, k: int, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled indices round-robin over ``k`` folds.

    The dealing position carries over between classes so fold sizes also
    stay within one of each other.
    """
    if k < 2 and len(dataset) > 1:
        raise ConfigError("k must be >= 2")
    counts = dataset.counts
    short = {c: n for c, n in counts.items() if n < k}
    if short:
        raise DataError(f"classes with fewer than k={k} samples: {short}")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in range(len(dataset.class_names)):
        for i in rng.permutation(np.flatnonzero(labels == c)):
            folds[cursor % k].append(int(i))
            cursor += 1
    arrays = [np.array(sorted(f), dtype=np.int64) for f in folds]
    hist = [{name: int(np.sum(labels[f] == c)) for c, name in enumerate(dataset.class_names)}
            for f in arrays]
    return FoldPlan(arrays, hist)


# --------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = truth, cols = prediction
    class_names: list[str]

    @classmethod
    def from_predictions(cls, truth, pred, class_names) -> "MetricsReport":
        K = len(class_names)
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if truth.size == 0:
            raise DataError("cannot score an empty set")
        cm = np.zeros((K, K), dtype=np.int64)
        np.add.at(cm, (truth, pred), 1)
        return cls(cm, list(class_names))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.confusion).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.confusion.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.confusion.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    @staticmethod
    def _ratio(num, den):
        num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)

    @property
    def precision(self) -> np.ndarray:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> np.ndarray:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> np.ndarray:
        return self._ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def class_accuracy(self) -> np.ndarray:
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def undefined_precision(self) -> np.ndarray:
        """True where TP + FP = 0 (precision reported as 0)."""
        return (self.tp + self.fp) == 0

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total)

    @property
    def macro(self) -> dict[str, float]:
        return {"precision": float(self.precision.mean()), "recall": float(self.recall.mean()),
                "f1": float(self.f1.mean()), "accuracy": self.accuracy}

    @property
    def micro_precision(self) -> float:
        return float(self.tp.sum() / (self.tp.sum() + self.fp.sum()))

    @property
    def micro_recall(self) -> float:
        return float(self.tp.sum() / (self.tp.sum() + self.fn.sum()))

    def summary(self) -> str:
        m = self.macro
        lines = [f"accuracy={m['accuracy']:.4f} precision={m['precision']:.4f} "
                 f"recall={m['recall']:.4f} f1={m['f1']:.4f} (macro, n={self.total})"]
        for i, name in enumerate(self.class_names):
            lines.append(f"  {name:>6}: precision={self.precision[i]:.4f} recall={self.recall[i]:.4f} "
                         f"f1={self.f1[i]:.4f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


HISTORY_FIELDS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")


def predict_proba(model: Model, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model.forward(X[i:i + batch_size], INFER) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    # a lone trailing sample cannot be batch-normalised
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _score(model: Model, X, y) -> tuple[float, float]:
    if len(X) == 0:
        return math.nan, math.nan
    p = predict_proba(model, X)
    return sparse_ce_loss(p, y), float(np.mean(np.argmax(p, axis=1) == y))


def train(model: Model, train_set: Dataset, val_set: Dataset | None, config: TrainConfig,
          log_every: int = 0):
    """Mini-batch Adam training with best-validation-accuracy checkpointing.

    Returns ``(model, history)``; ``model`` holds the best weights seen (by
    validation accuracy, or by training loss without a validation set).
    Stops early after ``patience`` epochs without improvement.
    """
    config.validate()
    if len(train_set) == 0:
        raise DataError("empty training set")
    X, y = train_set.to_arrays()
    if X.shape[1] != model.config.input_len:
        raise DataError(f"clips have {X.shape[1]} samples, model expects {model.config.input_len}")
    Xv, yv = val_set.to_arrays() if val_set is not None and len(val_set) else (X[:0], y[:0])
    if len(X) < 2 and not config.freeze_batchnorm:
        raise DataError("batch norm training needs at least 2 samples")

    model.set_batchnorm_frozen(config.freeze_batchnorm)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState()
    history: list[EpochRecord] = []
    best_key, best_state, stale = None, None, 0
    try:
        for epoch in range(1, config.epochs + 1):
            total_loss, correct = 0.0, 0
            for b, idx in enumerate(_batches(len(X), config.batch_size, rng)):
                probs, _, cache = model.forward_cached(X[idx], TRAIN, rng)
                loss = sparse_ce_loss(probs, y[idx])
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = model.backward(softmax_ce_grad(probs, y[idx]), cache)
                adam_step(params, grads, state, config)
                total_loss += loss * len(idx)
                correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
            val_loss, val_acc = _score(model, Xv, yv)
            rec = EpochRecord(epoch, total_loss / len(X), correct / len(X), val_loss, val_acc)
            history.append(rec)
            if log_every and epoch % log_every == 0:
                logger.info("epoch %d loss %.4f acc %.3f val_loss %.4f val_acc %.3f", epoch,
                            rec.train_loss, rec.train_accuracy, val_loss, val_acc)
            key = (val_acc, -val_loss) if len(Xv) else (-rec.train_loss,)
            if best_key is None or key > best_key:
                best_key, best_state, stale = key, {k: v.copy() for k, v in model.state().items()}, 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    break
    finally:
        model.set_batchnorm_frozen(False)
    if best_state is not None:
        model.load_state(best_state)
    return model, history


def evaluate(model: Model, test_set: Dataset) -> MetricsReport:
    if len(test_set) == 0:
        raise DataError("cannot evaluate on an empty set")
    X, y = test_set.to_arrays()
    pred = np.argmax(predict_proba(model, X), axis=1)
    names = test_set.class_names
    if len(names) != model.config.num_classes:
        raise DataError(f"dataset has {len(names)} classes, model predicts {model.config.num_classes}")
    return MetricsReport.from_predictions(y, pred, names)


@dataclass
class CrossValResult:
    reports: list[MetricsReport]
    histories: list[list[EpochRecord]]

    def fold_metrics(self) -> list[dict[str, float]]:
        return [r.macro for r in self.reports]

    @property
    def mean(self) -> dict[str, float]:
        rows = self.fold_metrics()
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}

    @property
    def std(self) -> dict[str, float]:
        rows = self.fold_metrics()
        return {k: float(np.std([r[k] for r in rows])) for k in rows[0]}


def cross_validate(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
                   k: int = 10, model_factory=None) -> CrossValResult:
    """Stratified k-fold CV. Each fold is the test set; the rest splits 7:1 into train/val.

    Every fold trains a fresh model seeded by ``train_config.seed + fold``.
    """
    plan = stratified_kfold(dataset, k, train_config.seed)
    factory = model_factory or (lambda seed: build_model(model_config, seed))
    reports, histories = [], []
    for fold, test_idx in enumerate(plan.folds):
        rest = np.setdiff1d(np.arange(len(dataset)), test_idx)
        remainder = dataset.subset(rest)
        tr, va, _ = split_dataset(remainder, (7 / 8, 1 / 8, 0.0), train_config.seed + fold)
        model = factory(train_config.seed + fold)
        cfg = TrainConfig(**{**train_config.__dict__, "seed": train_config.seed + fold})
        model, hist = train(model, tr, va, cfg)
        reports.append(evaluate(model, dataset.subset(test_idx)))
        histories.append(hist)
        logger.info("fold %d/%d accuracy %.4f", fold + 1, k, reports[-1].accuracy)
    return CrossValResult(reports, histories)


# --------------------------------------------------------------------------
# CSV reports

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def history_to_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([_fmt(getattr(r, f)) for f in HISTORY_FIELDS])
    return buf.getvalue()


def history_from_csv(text: str) -> list[EpochRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_accuracy"]),
                        float(r["val_loss"]), float(r["val_accuracy"])) for r in rows]


METRIC_FIELDS = ("class", "tp", "fp", "tn", "fn", "precision", "recall", "f1", "accuracy")


def metrics_to_csv(report: MetricsReport) -> str:
    """Per-class rows plus a ``macro`` row (counts summed, ratios averaged)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for i, name in enumerate(report.class_names):
        w.writerow([name, report.tp[i], report.fp[i], report.tn[i], report.fn[i],
                    _fmt(report.precision[i]), _fmt(report.recall[i]), _fmt(report.f1[i]),
                    _fmt(report.class_accuracy[i])])
    m = report.macro
    w.writerow(["macro", report.tp.sum(), report.fp.sum(), report.tn.sum(), report.fn.sum(),
                _fmt(m["precision"]), _fmt(m["recall"]), _fmt(m["f1"]), _fmt(m["accuracy"])])
    return buf.getvalue()


def metrics_from_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {"class": r["class"]}
        row.update({k: int(r[k]) for k in ("tp", "fp", "tn", "fn")})
        row.update({k: float(r[k]) for k in ("precision", "recall", "f1", "accuracy")})
        out.append(row)
    return out


def confusion_to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred"] + report.class_names)
    for name, row in zip(report.class_names, report.confusion):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def confusion_from_csv(text: str) -> MetricsReport:
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0][1:]
    cm = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return MetricsReport(cm, names)


CV_FIELDS = ("fold", "accuracy", "precision", "recall", "f1")


def cv_to_csv(result: CrossValResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CV_FIELDS)
    for i, m in enumerate(result.fold_metrics(), 1):
        w.writerow([i] + [_fmt(m[k]) for k in CV_FIELDS[1:]])
    for label, agg in (("mean", result.mean), ("std", result.std)):
        w.writerow([label] + [_fmt(agg[k]) for k in CV_FIELDS[1:]])
    return buf.getvalue()


def cv_from_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {"fold": r["fold"]}
        row.update({k: float(r[k]) for k in CV_FIELDS[1:]})
        out.append(row)
    return out
