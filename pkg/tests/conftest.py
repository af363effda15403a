from __future__ import annotations

import numpy as np
import pytest

from fddms.can_codec import default_catalog
from fddms.nn import LstmDetector, OptimizerState, train
from fddms.pipeline import synthetic_prepared


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def prepared():
    """600 s of synthetic traffic: 590 instances, half attacked, split and normalized."""
    return synthetic_prepared(600, seed=0)


@pytest.fixture(scope="session")
def small_model(prepared):
    """A narrow detector trained briefly; good enough for behavioural checks."""
    s = prepared.split
    model = LstmDetector.create(20, 16, seed=0, normalizer=s.normalizer, features=s.train.features)
    train(model, s.train, epochs=15, batch_size=32, opt=OptimizerState("adam", lr=3e-3), seed=0)
    return model


class LinearSurrogate:
    """logit = <w, x> + b over the flattened window; exposes the detector's attack interface."""

    def __init__(self, w: np.ndarray, b: float):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)

    def logits(self, X):
        X = np.asarray(X, dtype=np.float64)
        X = X[None] if X.ndim == 2 else X
        return np.einsum("bij,ij->b", X, self.w) + self.b

    def predict_proba(self, X):
        return 1.0 / (1.0 + np.exp(-self.logits(X)))

    def predict(self, X):
        return (self.logits(X) >= 0).astype(np.int64)

    def logit_and_input_grad(self, X):
        f = self.logits(X)
        return f, np.broadcast_to(self.w, (len(f),) + self.w.shape).copy()

    def loss_and_input_grad(self, X, y):
        f = self.logits(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        p = 1.0 / (1.0 + np.exp(-f))
        loss = np.maximum(f, 0) - f * y + np.log1p(np.exp(-np.abs(f)))
        return loss, (p - y)[:, None, None] * self.w, p


@pytest.fixture
def surrogate():
    rng = np.random.default_rng(7)
    return LinearSurrogate(rng.normal(size=(5, 3)), 0.3)


@pytest.fixture
def make_surrogate():
    return LinearSurrogate


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
