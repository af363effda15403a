"""Single-layer LSTM binary classifier with exact backpropagation through time.

Gate pre-activations are packed as ``[input, forget, output, candidate]``
along the last axis of ``Wx`` (F x 4H), ``Wh`` (H x 4H) and ``b`` (4H).
The classification head reads the final hidden state through one dense
unit followed by a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..can_codec import ContractError
from ..dataset import Normalizer

PARAM_NAMES = ("Wx", "Wh", "b", "w_out", "b_out")


class StaleCacheError(ContractError):
    pass


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def init_params(n_features: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget-gate bias = 1."""
    H = hidden
    bx = 1.0 / np.sqrt(n_features)
    bh = 1.0 / np.sqrt(H)
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0
    return {
        "Wx": rng.uniform(-bx, bx, (n_features, 4 * H)),
        "Wh": rng.uniform(-bh, bh, (H, 4 * H)),
        "b": b,
        "w_out": rng.uniform(-bh, bh, H),
        "b_out": np.zeros(1),
    }


@dataclass
class Cache:
    X: np.ndarray
    gates: np.ndarray  # (T, B, 4H), post-activation
    c: np.ndarray  # (T+1, B, H)
    h: np.ndarray  # (T+1, B, H)
    logit: np.ndarray
    prob: np.ndarray
    version: int


@dataclass
class LstmDetector:
    params: dict[str, np.ndarray]
    normalizer: Normalizer | None = None
    features: tuple[str, ...] = ()
    training: bool = False
    version: int = field(default=0, compare=False)

    @classmethod
    def create(cls, n_features: int = 20, hidden: int = 128, seed: int = 0, **kw) -> LstmDetector:
        return cls(init_params(n_features, hidden, np.random.default_rng(seed)), **kw)

    @property
    def hidden(self) -> int:
        return self.params["Wh"].shape[0]

    @property
    def n_features(self) -> int:
        return self.params["Wx"].shape[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> LstmDetector:
        return LstmDetector({k: v.copy() for k, v in self.params.items()}, self.normalizer,
                            self.features, self.training, self.version)

    def touch(self) -> None:
        """Mark parameters as changed so older caches are rejected."""
        self.version += 1

    # -- forward / backward --------------------------------------------------

    def _as_batch(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.ndim != 3 or X.shape[2] != self.n_features:
            raise ContractError(f"expected windows of shape (W, {self.n_features}), got {X.shape[-2:]}")
        if not np.all(np.isfinite(X)):
            raise ContractError("non-finite input")
        return X, single

    def forward(self, X) -> tuple[np.ndarray, np.ndarray, Cache]:
        """Probability, logit and activation cache for one window or a batch."""
        X, single = self._as_batch(X)
        p = self.params
        B, T, _ = X.shape
        H = self.hidden
        Wh = p["Wh"]
        xz = X @ p["Wx"] + p["b"]  # (B, T, 4H)
        gates = np.empty((T, B, 4 * H))
        c = np.zeros((T + 1, B, H))
        h = np.zeros((T + 1, B, H))
        for t in range(T):
            z = xz[:, t] + h[t] @ Wh
            g = gates[t]
            g[:, :3 * H] = sigmoid(z[:, :3 * H])
            g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            c[t + 1] = g[:, H:2 * H] * c[t] + g[:, :H] * g[:, 3 * H:]
            h[t + 1] = g[:, 2 * H:3 * H] * np.tanh(c[t + 1])
        logit = h[T] @ p["w_out"] + p["b_out"][0]
        prob = sigmoid(logit)
        cache = Cache(X, gates, c, h, logit, prob, self.version)
        if single:
            return prob[0], logit[0], cache
        return prob, logit, cache

    def backward_logit(self, cache: Cache, dlogit) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate an upstream gradient on the logit(s).

        Returns parameter gradients (summed over the batch) and the input
        gradient with the same shape as the cached batch.
        """
        if cache.version != self.version:
            raise StaleCacheError("cache was produced before the last parameter update")
        p = self.params
        X = cache.X
        B, T, _ = X.shape
        H = self.hidden
        dlogit = np.broadcast_to(np.asarray(dlogit, dtype=np.float64).reshape(-1), (B,))
        Wh_T = p["Wh"].T
        Wx_T = p["Wx"].T
        dz_all = np.empty((T, B, 4 * H))
        dh = np.outer(dlogit, p["w_out"])
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            g = cache.gates[t]
            i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = np.tanh(cache.c[t + 1])
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cache.c[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - cand * cand)
            dc_next = dc * f
            dh = dz @ Wh_T
        dz_bt = dz_all.transpose(1, 0, 2)  # (B, T, 4H)
        grads = {
            "Wx": X.reshape(B * T, -1).T @ dz_bt.reshape(B * T, -1),
            "Wh": cache.h[:T].reshape(T * B, H).T @ dz_all.reshape(T * B, -1),
            "b": dz_all.sum(axis=(0, 1)),
            "w_out": cache.h[T].T @ dlogit,
            "b_out": np.array([dlogit.sum()]),
        }
        dX = dz_bt @ Wx_T
        return grads, dX

    def backward(self, cache: Cache, labels, reduction: str = "mean") -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of the binary cross-entropy with respect to params and inputs."""
        dlogit = bce_grad(cache.logit, labels)
        if reduction == "mean":
            dlogit = dlogit / len(dlogit)
        return self.backward_logit(cache, dlogit)

    # -- convenience ---------------------------------------------------------

    def predict_proba(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            return self.forward(X)[0]
        if len(X) == 0:
            return np.zeros(0)
        return np.concatenate([self.forward(X[i:i + batch_size])[0] for i in range(0, len(X), batch_size)])

    def logits(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            return np.zeros(0)
        return np.concatenate([self.forward(X[i:i + batch_size])[1] for i in range(0, len(X), batch_size)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def loss_and_input_grad(self, X, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-sample BCE loss, its input gradient, and probabilities."""
        prob, logit, cache = self.forward(X)
        prob = np.atleast_1d(prob)
        logit = np.atleast_1d(logit)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        _, dX = self.backward_logit(cache, bce_grad(logit, y))
        return bce_with_logits(logit, y), dX, prob

    def logit_and_input_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        _, logit, cache = self.forward(X)
        _, dX = self.backward_logit(cache, 1.0)
        return np.atleast_1d(logit), dX


def bce_with_logits(logit, label) -> np.ndarray:
    """-[y ln p + (1-y) ln(1-p)] with p = sigmoid(logit), computed stably."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_grad(logit, label) -> np.ndarray:
    """d BCE / d logit = p - y, without cancellation when p is close to y."""
    z = np.atleast_1d(np.asarray(logit, dtype=np.float64))
    y = np.broadcast_to(np.asarray(label, dtype=np.float64).reshape(-1), z.shape)
    return np.where(y >= 0.5, (1.0 - y) - sigmoid(-z), sigmoid(z) - y)


def bce_loss(probability, label, eps: float = 1e-12) -> float:
    p = np.clip(np.asarray(probability, dtype=np.float64), eps, 1 - eps)
    logit = np.log(p) - np.log1p(-p)
    return float(np.mean(bce_with_logits(logit, label)))
