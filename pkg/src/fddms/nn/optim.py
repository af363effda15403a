"""SGD, Adam, RMSprop and Adagrad with PyTorch default hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("sgd", "adam", "rmsprop", "adagrad")
DEFAULT_LR = {"sgd": 1e-3, "adam": 1e-3, "rmsprop": 1e-3, "adagrad": 0.1}


@dataclass
class OptimizerState:
    variant: str
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 0.99
    eps: float | None = None
    step_count: int = 0
    skipped: int = 0
    slots: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown optimizer {self.variant!r}; choose from {VARIANTS}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.variant]
        if self.eps is None:
            self.eps = 1e-10 if self.variant == "adagrad" else 1e-8

    def _slot(self, name: str, like: np.ndarray) -> np.ndarray:
        if name not in self.slots:
            self.slots[name] = np.zeros_like(like)
        return self.slots[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Update ``params`` in place. A non-finite gradient skips the step and returns False."""
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.step_count += 1
        t = self.step_count
        lr = self.lr
        for k, g in grads.items():
            p = params[k]
            if self.variant == "sgd":
                p -= lr * g
            elif self.variant == "adam":
                b1, b2 = self.betas
                m = self._slot(f"{k}.m", p)
                v = self._slot(f"{k}.v", p)
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            elif self.variant == "rmsprop":
                v = self._slot(f"{k}.v", p)
                v *= self.alpha
                v += (1 - self.alpha) * g * g
                p -= lr * g / (np.sqrt(v) + self.eps)
            else:
                s = self._slot(f"{k}.sum", p)
                s += g * g
                p -= lr * g / (np.sqrt(s) + self.eps)
        return True


def optimizer_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    opt.step(params, grads)
    return params
