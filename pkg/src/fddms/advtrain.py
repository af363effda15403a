"""Adversarial retraining with confidence-based selection of challenging examples.

Each iteration draws training instances, perturbs them with the configured
attack, keeps the ones the current model gets wrong (true-class probability
below the threshold) in an append-only repository, and retrains on the draw
plus an equal-size draw from the repository.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import AttackSpec, run_attack
from .can_codec import ContractError
from .dataset import InstanceSet, SplitSet
from .nn.lstm import LstmDetector
from .nn.optim import OptimizerState
from .nn.training import train

log = logging.getLogger(__name__)

# robust accuracy is always reported against these four
EVAL_ATTACKS = (
    AttackSpec.fgsm("l2"),
    AttackSpec.bim("l2"),
    AttackSpec.deepfool(),
    AttackSpec.deepfool_variant(),
)


def confidence_score(model: LstmDetector, X, y) -> np.ndarray | float:
    """Probability the model assigns to the true class."""
    p = model.predict_proba(X)
    y = np.asarray(y)
    score = np.where(y == 1, p, 1.0 - p)
    return float(score) if np.ndim(score) == 0 else score


def select(score, threshold: float = 0.5):
    return np.asarray(score) < threshold if np.ndim(score) else bool(score < threshold)


@dataclass
class AdvTrainConfig:
    iterations: int = 10
    draw_size: int = 200
    epochs: int = 30
    threshold: float = 0.5
    attack: AttackSpec = field(default_factory=lambda: AttackSpec.fgsm("l2"))
    selective: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 3
    seed: int = 0
    eval_attacks: tuple[AttackSpec, ...] = EVAL_ATTACKS
    defense: AttackSpec | None = field(default_factory=lambda: AttackSpec.fgsm("l2"))

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractError("iterations must be non-negative")
        if self.draw_size < 1:
            raise ContractError("draw size must be at least 1")
        if not 0.0 <= self.threshold < 1.0:
            raise ContractError("threshold must lie in [0, 1)")
        if self.patience < 1:
            raise ContractError("patience must be at least 1")
        if self.attack.method not in ("fgsm", "bim"):
            raise ContractError("retraining examples come from FGSM or BIM")


@dataclass
class Provenance:
    source: int
    method: str
    iteration: int
    score: float


@dataclass
class AdversarialRepository:
    """Append-only pool of selected adversarial windows with their true labels."""

    X: list[np.ndarray] = field(default_factory=list)
    y: list[int] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    def add(self, window: np.ndarray, label: int, prov: Provenance, threshold: float | None) -> None:
        """``threshold=None`` is the plain regime, where every example enters."""
        if threshold is not None and not prov.score < threshold:
            raise ContractError("only examples scoring below the threshold may enter the repository")
        self.X.append(np.array(window))
        self.y.append(int(label))
        self.provenance.append(prov)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of ``n`` members; with replacement only when the pool is smaller than ``n``."""
        if len(self) == 0:
            return np.zeros(0, np.int64)
        return rng.choice(len(self), size=n, replace=len(self) < n)

    def arrays(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.stack([self.X[i] for i in idx]), np.array([self.y[i] for i in idx], np.int64)


def input_noise_defense(model: LstmDetector, X, spec: AttackSpec | None) -> np.ndarray:
    """Perturb inputs with the named attack against the model's own prediction.

    Fragile predictions, such as those sitting just past the boundary after a
    minimal-perturbation attack, get pushed back across it.
    """
    X = np.asarray(X, dtype=np.float64)
    if spec is None or spec.epsilon == 0 or len(X) == 0:
        return X.copy()
    return run_attack(model, X, model.predict(X), spec).perturbed


def _accuracy(model: LstmDetector, X: np.ndarray, y: np.ndarray) -> float:
    return 100.0 * float(np.mean(model.predict(X) == y)) if len(X) else float("nan")


def robustness(model: LstmDetector, X: np.ndarray, y: np.ndarray,
               attacks: Sequence[AttackSpec] = EVAL_ATTACKS,
               defense: AttackSpec | None = None) -> dict:
    """Normal and robust accuracy (percent), with and without the input-noise defense.

    Robust accuracy is measured on the Attack-labeled windows: the fraction the
    detector still flags after the adversary tries to make them pass as Normal.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    atk = X[y == 1]
    out = {"normal_accuracy": _accuracy(model, X, y), "robust_accuracy": {}, "count": int(len(atk))}
    defended = {"normal_accuracy": _accuracy(model, input_noise_defense(model, X, defense), y),
                "robust_accuracy": {}} if defense is not None else None
    for spec in attacks:
        adv = run_attack(model, atk, np.ones(len(atk), np.int64), spec).perturbed
        out["robust_accuracy"][spec.name] = _accuracy(model, adv, np.ones(len(atk), np.int64))
        if defended is not None:
            noisy = input_noise_defense(model, adv, defense)
            defended["robust_accuracy"][spec.name] = _accuracy(model, noisy, np.ones(len(atk), np.int64))
    if defended is not None:
        out["defended"] = defended
    return out


@dataclass
class IterationRecord:
    iteration: int
    repository_size: int
    selected: int
    drawn: int
    fallback: bool
    seconds: float
    validation: dict


@dataclass
class RetrainResult:
    model: LstmDetector
    baseline: dict
    history: list[IterationRecord]
    best_iteration: int
    stopped_early: bool
    repository: AdversarialRepository
    accepted: bool

    def to_json(self) -> dict:
        return {
            "baseline": self.baseline,
            "iterations": [asdict(h) for h in self.history],
            "best_iteration": self.best_iteration,
            "stopped_early": self.stopped_early,
            "accepted": self.accepted,
            "repository": [asdict(p) for p in self.repository.provenance],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _stop_key(metrics: dict, fgsm_name: str) -> tuple[float, float]:
    # FGSM robust accuracy decides; the mean over all attacks breaks ties once it saturates
    ra = metrics["robust_accuracy"]
    return ra[fgsm_name], float(np.mean(list(ra.values())))


def adversarial_retrain(model: LstmDetector, split: SplitSet, cfg: AdvTrainConfig) -> RetrainResult:
    """Run the selection-based retraining loop and return the best iteration's model.

    ``model`` is not modified. The best model is chosen on validation FGSM
    robust accuracy among the retrained iterations. The run is ``accepted``
    when that value is at least the pre-retraining one.
    """
    rng = np.random.default_rng(cfg.seed)
    train_set = split.train
    val = split.validation
    fgsm_name = AttackSpec.fgsm("l2").name
    eval_attacks = tuple(cfg.eval_attacks)
    if fgsm_name not in {a.name for a in eval_attacks}:
        eval_attacks = (AttackSpec.fgsm("l2"),) + eval_attacks

    current = model.copy()
    baseline = robustness(current, val.X, val.y, eval_attacks, cfg.defense)
    repo = AdversarialRepository()
    opt = OptimizerState(cfg.optimizer, lr=cfg.lr)
    history: list[IterationRecord] = []
    best_model, best_key, best_iter = current.copy(), None, 0
    since_best = 0
    stopped = False

    for t in range(1, cfg.iterations + 1):
        started = time.perf_counter()
        n = min(cfg.draw_size, len(train_set))
        draw = rng.choice(len(train_set), size=n, replace=False)
        Xs, ys = train_set.X[draw], train_set.y[draw]
        adv = run_attack(current, Xs, ys, cfg.attack).perturbed
        scores = np.atleast_1d(confidence_score(current, adv, ys))
        chosen = select(scores, cfg.threshold) if cfg.selective else np.ones(n, bool)
        for k in np.flatnonzero(chosen):
            repo.add(adv[k], int(ys[k]), Provenance(int(draw[k]), cfg.attack.name, t, float(scores[k])),
                     cfg.threshold if cfg.selective else None)
        idx = repo.draw(cfg.draw_size, rng)
        fallback = len(idx) == 0
        if fallback:
            log.warning("iteration %d: repository empty, training on clean draw only", t)
            Xt, yt = Xs, ys
        else:
            Xa, ya = repo.arrays(idx)
            Xt, yt = np.concatenate([Xs, Xa]), np.concatenate([ys, ya])
        batch = InstanceSet(Xt, yt, np.zeros(len(yt), np.int64), np.where(yt == 1, 0, -1),
                            train_set.features, train_set.rate)
        train(current, batch, epochs=cfg.epochs, batch_size=cfg.batch_size, opt=opt,
              seed=int(rng.integers(2**31)))
        metrics = robustness(current, val.X, val.y, eval_attacks, cfg.defense)
        rec = IterationRecord(t, len(repo), int(chosen.sum()), len(idx), fallback,
                              time.perf_counter() - started, metrics)
        history.append(rec)
        log.info("iteration %d: repo %d selected %d val %s", t, len(repo), rec.selected, metrics["robust_accuracy"])
        key = _stop_key(metrics, fgsm_name)
        if best_key is None or key > best_key:
            best_key, best_model, best_iter = key, current.copy(), t
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = True
                break

    if best_key is None:
        return RetrainResult(current, baseline, history, 0, False, repo, True)
    accepted = best_key[0] >= baseline["robust_accuracy"][fgsm_name]
    return RetrainResult(best_model, baseline, history, best_iter, stopped, repo, accepted)
