"""White-box evasion attacks on the detector: FGSM, BIM, DeepFool and the clipped/scaled DeepFool variant.

All attacks work on normalized windows in batches of shape (B, W, F) and
return an :class:`AdvResult` whose arrays share the leading batch axis.
The detector's decision score is its pre-sigmoid logit; class Attack means
``logit >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .can_codec import ContractError
from .nn.lstm import LstmDetector

METHODS = ("fgsm", "bim", "deepfool", "deepfool_variant")


@dataclass(frozen=True)
class AttackSpec:
    method: str
    norm: str = "l2"
    epsilon: float = 13.0
    step: float | None = None
    iterations: int | None = None
    kappa: float = 0.5
    alpha_clip: float = 0.95
    overshoot: float = 0.02
    early_stop: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown attack method {self.method!r}")
        if self.norm not in ("l2", "linf"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ContractError("epsilon must be non-negative")
        if self.n_iter < 1:
            raise ContractError("iterations must be at least 1")
        if not 0 < self.kappa <= 1:
            raise ContractError("kappa must lie in (0, 1]")
        if self.alpha_clip <= 0:
            raise ContractError("alpha_clip must be positive")

    @property
    def n_iter(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return {"fgsm": 1, "bim": 20}.get(self.method, 50)

    @property
    def step_size(self) -> float:
        """Per-iteration BIM step; defaults to epsilon / iterations."""
        return self.step if self.step is not None else self.epsilon / self.n_iter

    @property
    def name(self) -> str:
        if self.method in ("fgsm", "bim"):
            return f"{self.method.upper()}-{'L2' if self.norm == 'l2' else 'Linf'}"
        return "DeepFool" if self.method == "deepfool" else "DeepFoolVariant"

    @classmethod
    def fgsm(cls, norm: str = "l2", epsilon: float = 13.0) -> AttackSpec:
        return cls("fgsm", norm, epsilon)

    @classmethod
    def bim(cls, norm: str = "l2", epsilon: float = 13.0, iterations: int = 20, step: float | None = None) -> AttackSpec:
        return cls("bim", norm, epsilon, step, iterations)

    @classmethod
    def deepfool(cls, iterations: int = 50, overshoot: float = 0.02) -> AttackSpec:
        return cls("deepfool", iterations=iterations, overshoot=overshoot)

    @classmethod
    def deepfool_variant(cls, iterations: int = 50, overshoot: float = 0.02, kappa: float = 0.5,
                         alpha_clip: float = 0.95) -> AttackSpec:
        return cls("deepfool_variant", iterations=iterations, overshoot=overshoot, kappa=kappa, alpha_clip=alpha_clip)


STANDARD_ATTACKS = (
    AttackSpec.fgsm("l2"), AttackSpec.fgsm("linf"), AttackSpec.bim("l2"), AttackSpec.bim("linf"),
    AttackSpec.deepfool(), AttackSpec.deepfool_variant(),
)


@dataclass
class AdvResult:
    method: str
    original: np.ndarray
    perturbed: np.ndarray
    success: np.ndarray  # bool (B,)
    iterations: np.ndarray  # int (B,)
    r_tot: np.ndarray  # accumulated perturbation before any final overshoot
    zero_grad: np.ndarray  # bool (B,), attack stopped on a vanishing gradient
    trace: list[np.ndarray] | None = None

    @property
    def perturbation(self) -> np.ndarray:
        return self.perturbed - self.original

    def __len__(self) -> int:
        return len(self.original)


def _batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


def _labels(y, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(y, dtype=np.float64).reshape(-1), (n,)).copy()


def _flat_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("bij,bij->b", a, a))


def _direction(g: np.ndarray, norm: str) -> tuple[np.ndarray, np.ndarray]:
    """Unit-budget ascent direction and a mask of zero gradients."""
    gn = _flat_norm(g)
    zero = gn == 0.0
    if norm == "linf":
        return np.sign(g), zero
    safe = np.where(zero, 1.0, gn)
    return g / safe[:, None, None], zero


def _project(delta: np.ndarray, eps: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    n = _flat_norm(delta)
    factor = np.where(n > eps, eps / np.where(n == 0, 1.0, n), 1.0)
    return delta * factor[:, None, None]


def _loss_grad(model: LstmDetector, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, g, _ = model.loss_and_input_grad(X, y)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def fgsm(model: LstmDetector, X, y, spec: AttackSpec | None = None) -> AdvResult:
    """One step of size epsilon along sign(grad) (Linf) or grad/||grad||_2 (L2)."""
    spec = spec or AttackSpec.fgsm()
    X = _batch(X)
    y = _labels(y, len(X))
    d, zero = _direction(_loss_grad(model, X, y), spec.norm)
    Xp = X + spec.epsilon * d
    success = model.predict(Xp) != y
    return AdvResult(spec.name, X, Xp, success, np.ones(len(X), np.int64), Xp - X, zero)


def bim(model: LstmDetector, X, y, spec: AttackSpec | None = None) -> AdvResult:
    """Iterated FGSM steps of ``spec.step_size``, projected back onto the epsilon ball after each step."""
    spec = spec or AttackSpec.bim()
    X = _batch(X)
    y = _labels(y, len(X))
    Xt = X.copy()
    iters = np.zeros(len(X), np.int64)
    active = np.ones(len(X), bool)
    zero_any = np.zeros(len(X), bool)
    for _ in range(spec.n_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        d, zero = _direction(_loss_grad(model, Xt[idx], y[idx]), spec.norm)
        zero_any[idx] |= zero
        Xt[idx] = X[idx] + _project(Xt[idx] + spec.step_size * d - X[idx], spec.epsilon, spec.norm)
        iters[idx] += 1
        if spec.early_stop:
            active[idx[model.predict(Xt[idx]) != y[idx]]] = False
    success = model.predict(Xt) != y
    return AdvResult(spec.name, X, Xt, success, iters, Xt - X, zero_any)


def _boundary_step(logit: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linearised step onto the decision boundary: -f * g / ||g||^2."""
    sq = np.einsum("bij,bij->b", grad, grad)
    zero = sq == 0.0
    coef = np.where(zero, 0.0, -logit / np.where(zero, 1.0, sq))
    return coef[:, None, None] * grad, zero


def deepfool(model: LstmDetector, X, spec: AttackSpec | None = None, keep_trace: bool = False) -> AdvResult:
    """Binary DeepFool on the logit, pushing windows flagged Attack across to Normal.

    Windows already classified Normal are returned unchanged. Each iteration
    adds the linearised boundary step to ``r_tot`` and tests
    ``x + (1 + overshoot) * r_tot``; it stops on a label flip or after
    ``spec.n_iter`` iterations.
    """
    spec = spec or AttackSpec.deepfool()
    X = _batch(X)
    B = len(X)
    os_ = 1.0 + spec.overshoot
    orig = model.logits(X) >= 0
    r_tot = np.zeros_like(X)
    iters = np.zeros(B, np.int64)
    done = ~orig
    zero_any = np.zeros(B, bool)
    trace = [] if keep_trace else None
    for _ in range(spec.n_iter):
        idx = np.flatnonzero(~done)
        if not len(idx):
            break
        f, g = model.logit_and_input_grad(X[idx] + os_ * r_tot[idx])
        flipped = f < 0
        done[idx[flipped]] = True
        idx, f, g = idx[~flipped], f[~flipped], g[~flipped]
        if not len(idx):
            break
        r, zero = _boundary_step(f, g)
        if keep_trace:
            full = np.zeros_like(X)
            full[idx] = r
            trace.append(full)
        zero_any[idx] |= zero
        done[idx[zero]] = True
        r_tot[idx] += r
        iters[idx] += 1
    Xp = X + os_ * r_tot
    success = model.logits(Xp) < 0
    return AdvResult("DeepFool", X, Xp, success, iters, r_tot, zero_any, trace)


def deepfool_variant(model: LstmDetector, X, spec: AttackSpec | None = None, keep_trace: bool = False) -> AdvResult:
    """DeepFool with elementwise gradient clipping to [-alpha, alpha] and steps scaled by kappa.

    Follows the loop literally: ``x_i = x + r_tot``, step from the clipped
    gradient at ``x_i``, ``r_tot += kappa * r_i``, then if ``x_i`` already
    carries the other label the attack returns ``x_i`` with no overshoot.
    After ``spec.n_iter`` iterations the result is ``x + (1 + overshoot) * r_tot``.
    """
    spec = spec or AttackSpec.deepfool_variant()
    X = _batch(X)
    B = len(X)
    orig = model.logits(X) >= 0
    r_tot = np.zeros_like(X)
    Xp = X.copy()
    iters = np.zeros(B, np.int64)
    active = orig.copy()
    early = ~orig
    zero_any = np.zeros(B, bool)
    trace = [] if keep_trace else None
    a = spec.alpha_clip
    for _ in range(spec.n_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        xi = X[idx] + r_tot[idx]
        f, g = model.logit_and_input_grad(xi)
        g = np.clip(g, -a, a)
        r, zero = _boundary_step(f, g)
        if keep_trace:
            full = np.zeros_like(X)
            full[idx] = r
            trace.append(full)
        r_tot[idx] += spec.kappa * r
        iters[idx] += 1
        flipped = f < 0
        hit = idx[flipped]
        Xp[hit] = xi[flipped]
        early[hit] = True
        active[hit] = False
        stuck = idx[zero & ~flipped]
        zero_any[stuck] = True
        active[stuck] = False
    rest = ~early
    Xp[rest] = X[rest] + (1.0 + spec.overshoot) * r_tot[rest]
    success = model.logits(Xp) < 0
    return AdvResult("DeepFoolVariant", X, Xp, success, iters, r_tot, zero_any, trace)


def run_attack(model: LstmDetector, X, y, spec: AttackSpec, batch_size: int = 256) -> AdvResult:
    X = _batch(X)
    y = _labels(y, len(X))
    parts = []
    for s in range(0, len(X), batch_size):
        xb, yb = X[s:s + batch_size], y[s:s + batch_size]
        if spec.method == "fgsm":
            parts.append(fgsm(model, xb, yb, spec))
        elif spec.method == "bim":
            parts.append(bim(model, xb, yb, spec))
        elif spec.method == "deepfool":
            parts.append(deepfool(model, xb, spec))
        else:
            parts.append(deepfool_variant(model, xb, spec))
    if not parts:
        empty = np.zeros((0,) + X.shape[1:])
        z = np.zeros(0, bool)
        return AdvResult(spec.name, empty, empty, z, np.zeros(0, np.int64), empty, z)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return AdvResult(spec.name, cat("original"), cat("perturbed"), cat("success"), cat("iterations"),
                     cat("r_tot"), cat("zero_grad"))


# --- metrics -----------------------------------------------------------------

@dataclass
class DistortionReport:
    method: str
    asr: float
    mean_l0: float
    mean_l2: float
    mean_linf: float
    count: int
    subset: str = "all"
    empty: bool = False
    units: str = "normalized"
    extra: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.method, f"{self.asr:.2f}", f"{self.mean_l0:.2f}", f"{self.mean_l2:.2f}", f"{self.mean_linf:.2f}"]


def perturbation_norms(original: np.ndarray, perturbed: np.ndarray, unit_scale: np.ndarray | None = None,
                       tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair (L0, L2, Linf) of the difference; ``unit_scale`` converts features to physical units."""
    d = _batch(perturbed) - _batch(original)
    if unit_scale is not None:
        d = d * np.asarray(unit_scale)
    flat = np.abs(d.reshape(len(d), -1))
    return (np.sum(flat > tol, axis=1).astype(np.float64), np.sqrt(np.sum(flat * flat, axis=1)),
            flat.max(axis=1) if flat.shape[1] else np.zeros(len(d)))


def distortion_metrics(originals, perturbed, success=None, subset: str = "all", method: str = "",
                       unit_scale: np.ndarray | None = None) -> DistortionReport:
    originals = _batch(originals)
    perturbed = _batch(perturbed)
    if originals.shape != perturbed.shape:
        raise ContractError("originals and perturbed differ in shape")
    success = np.ones(len(originals), bool) if success is None else np.asarray(success, bool)
    asr = 100.0 * float(success.mean()) if len(success) else 0.0
    keep = success if subset == "successful" else np.ones(len(originals), bool)
    units = "physical" if unit_scale is not None else "normalized"
    if not keep.any():
        return DistortionReport(method, asr, 0.0, 0.0, 0.0, 0, subset, True, units)
    l0, l2, linf = perturbation_norms(originals[keep], perturbed[keep], unit_scale)
    return DistortionReport(method, asr, float(l0.mean()), float(l2.mean()), float(linf.mean()),
                            int(keep.sum()), subset, False, units)


def attack_success_rate(model: LstmDetector, result: AdvResult) -> float:
    """Percent of perturbed windows the detector now labels Normal."""
    if len(result) == 0:
        raise ContractError("no adversarial results")
    return 100.0 * float(np.mean(model.predict(result.perturbed) == 0))


def attack_targets(model: LstmDetector, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of true Attack instances the detector currently flags as Attack."""
    return np.flatnonzero((np.asarray(y) == 1) & (model.predict(X) == 1))


def report(model: LstmDetector, X: np.ndarray, y: np.ndarray, spec: AttackSpec, subset: str = "all",
           unit_scale: np.ndarray | None = None) -> tuple[DistortionReport, AdvResult]:
    idx = attack_targets(model, X, y)
    res = run_attack(model, X[idx], y[idx], spec)
    rep = distortion_metrics(res.original, res.perturbed, res.success, subset, spec.name, unit_scale)
    if len(res):
        rep.asr = attack_success_rate(model, res)
    rep.extra = {"mean_iterations": float(res.iterations.mean()) if len(res) else math.nan,
                 "zero_grad": int(res.zero_grad.sum())}
    return rep, res
