"""Supervised training, frozen-backbone linear evaluation and the reported metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetBundle
from .errors import ConfigurationError, DimensionError, NumericalError
from .model import Model, embed, forward_features, forward_head
from .ssl import AugmentConfig, augment_batch, view_rng

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------ metrics


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DimensionError("label and prediction arrays differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_confusion(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DimensionError(f"confusion matrix must be square, got {cm.shape}")
    if cm.sum() == 0:
        raise ConfigurationError("empty confusion matrix")
    return cm


def accuracy(cm) -> float:
    cm = _check_confusion(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_recall(cm) -> np.ndarray:
    """Recall per class; NaN for classes without support."""
    cm = _check_confusion(cm)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / np.where(support > 0, support, 1), np.nan)


def balanced_accuracy(cm) -> float:
    """Unweighted mean of recall over classes that have support."""
    r = per_class_recall(cm)
    return float(np.mean(r[~np.isnan(r)]))


def wasserstein_1d(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions (integral of |F_a - F_b|)."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("wasserstein_1d needs non-empty samples")
    allv = np.concatenate([a, b])
    allv.sort(kind="mergesort")
    deltas = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / a.size
    fb = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * deltas))


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list[str]
    split_sizes: dict[str, int] = field(default_factory=dict)
    name: str = ""

    @property
    def accuracy(self) -> float:
        return accuracy(self.confusion)

    @property
    def balanced_accuracy(self) -> float:
        return balanced_accuracy(self.confusion)

    @property
    def per_class_recall(self) -> np.ndarray:
        return per_class_recall(self.confusion)

    def to_dict(self) -> dict:
        rec = self.per_class_recall
        return {
            "name": self.name,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "per_class_recall": {c: (None if np.isnan(r) else float(r)) for c, r in zip(self.class_names, rec)},
            "confusion": self.confusion.tolist(),
            "class_names": list(self.class_names),
            "split_sizes": dict(self.split_sizes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(np.asarray(d["confusion"], dtype=np.int64), list(d["class_names"]), dict(d.get("split_sizes", {})), d.get("name", ""))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        lines = [f"{self.name or 'report'}: accuracy {self.accuracy:.4f}  balanced accuracy {self.balanced_accuracy:.4f}"]
        width = max(len(c) for c in self.class_names)
        for c, r, n in zip(self.class_names, self.per_class_recall, self.confusion.sum(axis=1)):
            lines.append(f"  {c:<{width}}  recall {r:.4f}  support {n}")
        return "\n".join(lines)

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for c, row in zip(self.class_names, self.confusion):
                w.writerow([c, *[int(v) for v in row]])

    def write_recall_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "recall", "support"])
            for c, r, n in zip(self.class_names, self.per_class_recall, self.confusion.sum(axis=1)):
                w.writerow([c, repr(float(r)), int(n)])


# ------------------------------------------------------------------ loss


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """``w_c = N / (K N_c)``, rescaled to mean 1."""
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if k < 2:
        raise ConfigurationError("class weights need at least two classes")
    if np.any(counts == 0):
        raise ConfigurationError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    w = len(labels) / (k * counts)
    return w / w.mean()


def weighted_cross_entropy(logits, labels, weights=None) -> Tensor:
    """Mean over the batch of ``weights[y_i] * CE(logits_i, y_i)``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match {len(labels)} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ConfigurationError("labels out of range")
    if not np.all(np.isfinite(logits.data)):
        raise NumericalError("non-finite logits")
    per = ad.sub(ad.logsumexp(logits, axis=1), ad.pick(logits, labels))
    if weights is not None:
        w = np.asarray(weights, dtype=logits.dtype)[labels]
        per = ad.mul(per, Tensor(w))
    return ad.mean(per)


# ------------------------------------------------------------------ optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


# ------------------------------------------------------------------ training


def _predict(model: Model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        _, pooled = forward_features(model, x[i : i + batch_size], training=False)
        out.append(np.argmax(forward_head(model, pooled, "classifier").data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _split_sizes(bundle: DatasetBundle) -> dict[str, int]:
    return {s: int(len(bundle.indices(s))) for s in ("train", "val", "test")}


def _report(bundle: DatasetBundle, split: str, pred: np.ndarray, name: str) -> EvalReport:
    y = bundle.labels[bundle.indices(split)]
    return EvalReport(confusion_matrix(y, pred, bundle.n_classes), list(bundle.phenotypes), _split_sizes(bundle), name)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    augment: bool = True
    standardize: bool = True  # linear probe only: z-score embeddings with train statistics

    def validate(self) -> None:
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def train_supervised(bundle: DatasetBundle, model: Model, cfg: TrainConfig | None = None, aug: AugmentConfig | None = None) -> tuple[Model, EvalReport, list[dict]]:
    """Train backbone and classifier with weighted cross-entropy and Adam.

    The checkpoint with the best validation balanced accuracy is returned
    together with its test-split report and the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    aug = aug or AugmentConfig()
    if "cls.fc1.weight" not in model.params:
        raise ConfigurationError("model needs a classifier head (num_classes > 0)")
    work = model.astype(np.float32).copy()
    tr = bundle.indices("train")
    xv, _ = bundle.subset("val")
    weights = class_weights(bundle.labels[tr], bundle.n_classes)
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best = work.copy()
    best_bacc = balanced_accuracy(confusion_matrix(bundle.labels[bundle.indices("val")], _predict(work, xv), bundle.n_classes)) if len(xv) else -1.0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(tr)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = bundle.patches[idx]
            if cfg.augment:
                x = augment_batch(x, aug, [view_rng(cfg.seed, epoch, i, 0) for i in idx])
            t = {k: Tensor(v, requires_grad=True) for k, v in work.params.items()}
            _, pooled = forward_features(work, x, training=True, params=t)
            loss = weighted_cross_entropy(forward_head(work, pooled, "classifier", params=t), bundle.labels[idx], weights)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"loss diverged at epoch {epoch}")
            loss.backward()
            opt.step(work.params, {k: v.grad for k, v in t.items()})
            losses.append(loss.item())
        bacc = balanced_accuracy(confusion_matrix(bundle.labels[bundle.indices("val")], _predict(work, xv), bundle.n_classes))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_balanced_accuracy": bacc})
        logger.info("epoch %d loss %.4f val bacc %.4f", epoch, history[-1]["loss"], bacc)
        if bacc > best_bacc:
            best_bacc, best = bacc, work.copy()
    xt, _ = bundle.subset("test")
    return best, _report(bundle, "test", _predict(best, xt), "supervised"), history


@dataclass
class LinearProbe:
    weight: np.ndarray  # (K, D)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return ((emb - self.mean) / self.scale) @ self.weight.T + self.bias

    def predict(self, emb: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(emb), axis=1)


def fit_linear_probe(emb: np.ndarray, bundle: DatasetBundle, cfg: TrainConfig) -> tuple[LinearProbe, list[dict]]:
    """Weighted-cross-entropy linear classifier on fixed embeddings, selected by validation balanced accuracy."""
    tr, va = bundle.indices("train"), bundle.indices("val")
    k, d = bundle.n_classes, emb.shape[1]
    if cfg.standardize:
        mean = emb[tr].mean(axis=0)
        scale = emb[tr].std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean, scale = np.zeros(d), np.ones(d)
    z = (emb - mean) / scale
    weights = class_weights(bundle.labels[tr], k)
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(d)
    params = {"weight": rng.uniform(-bound, bound, size=(k, d)), "bias": np.zeros(k)}
    opt = Adam(lr=cfg.lr)

    def val_bacc():
        pred = np.argmax(z[va] @ params["weight"].T + params["bias"], axis=1)
        return balanced_accuracy(confusion_matrix(bundle.labels[va], pred, k))

    best = {n: v.copy() for n, v in params.items()}
    best_bacc = val_bacc() if len(va) else -1.0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(tr)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            t = {n: Tensor(v, requires_grad=True) for n, v in params.items()}
            loss = weighted_cross_entropy(ad.linear(Tensor(z[idx]), t["weight"], t["bias"]), bundle.labels[idx], weights)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"linear probe diverged at epoch {epoch}")
            loss.backward()
            opt.step(params, {n: v.grad for n, v in t.items()})
            losses.append(loss.item())
        bacc = val_bacc()
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_balanced_accuracy": bacc})
        if bacc > best_bacc:
            best_bacc, best = bacc, {n: v.copy() for n, v in params.items()}
    return LinearProbe(best["weight"], best["bias"], mean, scale), history


def linear_eval(bundle: DatasetBundle, model: Model, cfg: TrainConfig | None = None, name: str = "linear") -> tuple[EvalReport, LinearProbe, list[dict]]:
    """Frozen-backbone linear evaluation.

    Embeddings are computed once in eval mode; only the linear layer is
    trained. The backbone is verified to be untouched afterwards.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    before = model.digest()
    emb = embed(model, bundle.patches.astype(model.params["stem.weight" if "stem.weight" in model.params else "conv1.weight"].dtype))
    probe, history = fit_linear_probe(emb, bundle, cfg)
    if model.digest() != before:
        raise NumericalError("backbone parameters changed during linear evaluation")
    te = bundle.indices("test")
    return _report(bundle, "test", probe.predict(emb[te]), name), probe, history


def compare_reports(reports: Sequence[EvalReport]) -> dict:
    """Side-by-side comparison used by the report command."""
    return {
        "models": [r.name for r in reports],
        "accuracy": {r.name: r.accuracy for r in reports},
        "balanced_accuracy": {r.name: r.balanced_accuracy for r in reports},
        "per_class_recall": {r.name: dict(zip(r.class_names, map(float, r.per_class_recall))) for r in reports},
    }
