"""Mini-batch training, evaluation metrics and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..container import read_container, write_container
from ..dataset import InstanceSet, Normalizer
from .lstm import LstmDetector, bce_with_logits
from .optim import OptimizerState

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FDDMSCKP"


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    undefined: list[str] = field(default_factory=list)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> Metrics:
        undefined = []

        def ratio(num, den, name):
            if den == 0:
                undefined.append(name)
                return 0.0
            return num / den

        precision = ratio(tp, tp + fp, "precision")
        recall = ratio(tp, tp + fn, "recall")
        accuracy = ratio(tp + tn, tp + fp + tn + fn, "accuracy")
        f1 = ratio(2 * precision * recall, precision + recall, "f1")
        return cls(accuracy, precision, recall, f1, tp, fp, tn, fn, undefined)

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(y_true, y_pred) -> tuple[int, int, int, int]:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    return (int(np.sum(y_true & y_pred)), int(np.sum(~y_true & y_pred)),
            int(np.sum(~y_true & ~y_pred)), int(np.sum(y_true & ~y_pred)))


def evaluate(model: LstmDetector, instances: InstanceSet | tuple[np.ndarray, np.ndarray]) -> Metrics:
    X, y = (instances.X, instances.y) if isinstance(instances, InstanceSet) else instances
    pred = model.predict(X) if len(X) else np.zeros(0, np.int64)
    return Metrics.from_counts(*confusion(y, pred))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None
    skipped_steps: int = 0


def train(model: LstmDetector, train_set: InstanceSet, epochs: int = 50, batch_size: int = 32,
          opt: OptimizerState | None = None, seed: int = 0,
          validation: InstanceSet | None = None) -> tuple[LstmDetector, list[EpochStats]]:
    """Shuffled mini-batch BCE training, in place on ``model``."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    opt = opt or OptimizerState("adam")
    rng = np.random.default_rng(seed)
    X, y = train_set.X, train_set.y.astype(np.float64)
    n = len(X)
    history = []
    model.training = True
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        correct = 0
        skipped_before = opt.skipped
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            prob, logit, cache = model.forward(X[idx])
            total += float(bce_with_logits(logit, y[idx]).sum())
            correct += int(np.sum((prob >= 0.5) == (y[idx] >= 0.5)))
            grads, _ = model.backward(cache, y[idx])
            if opt.step(model.params, grads):
                model.touch()
        val_acc = evaluate(model, validation).accuracy if validation is not None and len(validation) else None
        stats = EpochStats(epoch, total / n, correct / n, val_acc, opt.skipped - skipped_before)
        history.append(stats)
        log.debug("epoch %d loss %.5f train_acc %.4f val_acc %s", epoch, stats.loss, stats.train_accuracy, val_acc)
    model.training = False
    return model, history


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, model: LstmDetector, opt: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    if model.normalizer is not None:
        arrays["norm.mean"] = model.normalizer.mean
        arrays["norm.std"] = model.normalizer.std
    meta = {"hidden": model.hidden, "n_features": model.n_features, "features": list(model.features),
            "version": model.version}
    if opt is not None:
        meta["optimizer"] = {"variant": opt.variant, "lr": opt.lr, "betas": list(opt.betas), "alpha": opt.alpha,
                             "eps": opt.eps, "step_count": opt.step_count, "skipped": opt.skipped}
        arrays.update({f"opt.{k}": v for k, v in opt.slots.items()})
    if extra:
        meta["extra"] = extra
    write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path: str | Path) -> tuple[LstmDetector, OptimizerState | None, dict]:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    norm = Normalizer(arrays["norm.mean"], arrays["norm.std"]) if "norm.mean" in arrays else None
    model = LstmDetector(params, norm, tuple(meta["features"]), version=meta.get("version", 0))
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = OptimizerState(o["variant"], o["lr"], tuple(o["betas"]), o["alpha"], o["eps"],
                             o["step_count"], o["skipped"],
                             {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
    return model, opt, meta.get("extra", {})


def write_history(path: str | Path, history: list[EpochStats], metrics: dict | None = None) -> None:
    doc = {"history": [asdict(h) for h in history]}
    if metrics:
        doc.update(metrics)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
