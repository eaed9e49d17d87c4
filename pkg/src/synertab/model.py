"""Small tabular classifier trained by explicit gradient descent.

The reference student is a feed-forward network: numerical inputs pass
straight through, each categorical feature goes through its own learned
embedding table, the concatenation feeds ReLU hidden layers, and the
output layer produces 2 logits. Forward and backward passes are written
out in numpy so gradients can be audited against finite differences.

Model contract (any drop-in student must provide): ``clone()``,
``forward(X) -> (N, 2) probabilities``, ``dense_input(X)``,
``forward_dense``, ``backward_dense``, ``embedding_grads``, ``params``
dict, and ``seed``. Training code only touches this surface, so a
different architecture can replace the MLP without changing the
teaching procedure.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .data import Dataset
from .errors import StateError, TrainingError

LOG_CLAMP = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cross_entropy(pred, target):
    """H(q, p) = -sum_c q_c log p_c with the log argument clamped at 1e-12.

    Accepts single vectors or (N, C) batches; returns a scalar or (N,)
    array of per-row losses accordingly.
    """
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    losses = -(q * np.log(np.clip(p, LOG_CLAMP, None))).sum(axis=-1)
    return losses


class MLPClassifier:
    """MLP with per-categorical embeddings producing binary-class probabilities."""

    def __init__(self, n_numerical, cat_cardinalities=(), hidden=(64, 64),
                 embedding_dim=8, seed=0, schema_fingerprint=""):
        self.n_numerical = int(n_numerical)
        self.cat_cardinalities = tuple(int(c) for c in cat_cardinalities)
        self.hidden = tuple(int(h) for h in hidden)
        self.embedding_dim = int(embedding_dim)
        self.seed = int(seed)
        self.schema_fingerprint = schema_fingerprint
        # columns are supplied as a full (N, F) matrix; these index into it
        self.numerical_cols = np.arange(self.n_numerical)
        self.categorical_cols = np.arange(
            self.n_numerical, self.n_numerical + len(self.cat_cardinalities)
        )

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for j, card in enumerate(self.cat_cardinalities):
            self.params["emb_%d" % j] = rng.normal(
                0.0, 1.0 / np.sqrt(self.embedding_dim), size=(card, self.embedding_dim)
            )
        dim = self.n_numerical + self.embedding_dim * len(self.cat_cardinalities)
        sizes = (dim,) + self.hidden + (2,)
        for k in range(len(sizes) - 1):
            fan_in = sizes[k]
            self.params["W_%d" % k] = rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                                 size=(sizes[k], sizes[k + 1]))
            self.params["b_%d" % k] = np.zeros(sizes[k + 1])
        self._n_linear = len(sizes) - 1

    @classmethod
    def for_dataset(cls, ds: Dataset, hidden=(64, 64), embedding_dim=8, seed=0):
        """Column order note: the model consumes ``reorder_columns(ds)``."""
        return cls(
            n_numerical=len(ds.schema.numerical_indices),
            cat_cardinalities=ds.categorical_cardinalities(),
            hidden=hidden,
            embedding_dim=embedding_dim,
            seed=seed,
            schema_fingerprint=ds.schema.fingerprint(),
        )

    def set_zero(self) -> "MLPClassifier":
        for k in self.params:
            self.params[k] = np.zeros_like(self.params[k])
        return self

    def clone(self) -> "MLPClassifier":
        other = MLPClassifier(
            self.n_numerical, self.cat_cardinalities, self.hidden,
            self.embedding_dim, self.seed, self.schema_fingerprint,
        )
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward ----------------------------------------------------------

    def _check(self, X: np.ndarray):
        expect = self.n_numerical + len(self.cat_cardinalities)
        if X.ndim != 2 or X.shape[1] != expect:
            raise ValueError("batch shape %s does not match model (F=%d)" % (X.shape, expect))

    def dense_input(self, X: np.ndarray):
        """Map raw feature rows to the dense first-layer input.

        Returns (H0, Xcat) where Xcat holds the integer category indices
        needed later for embedding gradients.
        """
        X = np.asarray(X, dtype=np.float64)
        self._check(X)
        parts = [X[:, self.numerical_cols]]
        Xcat = X[:, self.categorical_cols].astype(np.int64)
        for j in range(len(self.cat_cardinalities)):
            parts.append(self.params["emb_%d" % j][Xcat[:, j]])
        return np.concatenate(parts, axis=1), Xcat

    def forward_dense(self, H0: np.ndarray):
        cache = {"acts": [H0]}
        h = H0
        for k in range(self._n_linear):
            a = h @ self.params["W_%d" % k] + self.params["b_%d" % k]
            if k < self._n_linear - 1:
                h = np.maximum(a, 0.0)
            else:
                h = a  # output logits
            cache["acts"].append(h)
        probs = softmax(h)
        cache["probs"] = probs
        return probs, cache

    def forward(self, X: np.ndarray) -> np.ndarray:
        H0, _ = self.dense_input(X)
        probs, _ = self.forward_dense(H0)
        return probs

    # -- backward ---------------------------------------------------------

    def backward_dense(self, cache, dlogits: np.ndarray):
        """Gradients of all linear layers plus the dense-input gradient."""
        grads = {}
        acts = cache["acts"]
        delta = dlogits
        for k in range(self._n_linear - 1, -1, -1):
            h_in = acts[k]
            grads["W_%d" % k] = h_in.T @ delta
            grads["b_%d" % k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.params["W_%d" % k].T) * (acts[k] > 0.0)
        dH0 = delta @ self.params["W_0"].T
        return grads, dH0

    def embedding_grads(self, dH0, Xcat_a, Xcat_b=None, lam: float = 1.0):
        """Scatter dense-input gradients back into the embedding tables.

        With a MixUp pair, row r's dense input was lam * emb(a_r) +
        (1 - lam) * emb(b_r); gradients flow to both index sets with the
        matching convex weights.
        """
        grads = {}
        offset = self.n_numerical
        d = self.embedding_dim
        for j, card in enumerate(self.cat_cardinalities):
            g = np.zeros((card, d))
            chunk = dH0[:, offset + j * d: offset + (j + 1) * d]
            np.add.at(g, Xcat_a[:, j], lam * chunk)
            if Xcat_b is not None and lam != 1.0:
                np.add.at(g, Xcat_b[:, j], (1.0 - lam) * chunk)
            grads["emb_%d" % j] = g
        return grads


def ce_grad_logits(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean soft cross-entropy)/d(logits) for a batch."""
    return (probs - targets) / probs.shape[0]


def mse_grad_logits(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(mean squared error over all entries)/d(logits) through softmax."""
    n, c = probs.shape
    dlp = 2.0 * (probs - targets) / (n * c)
    return probs * (dlp - (dlp * probs).sum(axis=1, keepdims=True))


def class_balance_penalty(probs: np.ndarray, prior=None):
    """KL(prior || batch-mean prediction) and its logit gradient.

    Anchors the batch-mean prediction to ``prior`` (uniform when not
    given; the annotation base rate during teaching), which stops the
    self-guessing loop from collapsing onto one class without fighting a
    genuinely skewed label distribution.
    """
    n, c = probs.shape
    if prior is None:
        prior = np.full(c, 1.0 / c)
    else:
        prior = np.asarray(prior, dtype=np.float64)
    mean = np.clip(probs.mean(axis=0), LOG_CLAMP, None)
    penalty = float(np.sum(prior * np.log(np.clip(prior / mean, LOG_CLAMP, None))))
    dlp = np.broadcast_to(-prior / (n * mean), probs.shape)
    grad = probs * (dlp - (dlp * probs).sum(axis=1, keepdims=True))
    return penalty, grad


class Adam:
    """Standard Adam with bias correction; one state slot per parameter."""

    def __init__(self, params: dict, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.learning_rate * (self.m[k] / b1t) / (
                np.sqrt(self.v[k] / b2t) + self.eps
            )


def train_step(model: MLPClassifier, optimizer: Adam, X, targets) -> float:
    """One cross-entropy optimizer step against soft targets; returns loss."""
    targets = np.asarray(targets, dtype=np.float64)
    H0, Xcat = model.dense_input(X)
    probs, cache = model.forward_dense(H0)
    loss = float(soft_cross_entropy(probs, targets).mean())
    if not np.isfinite(loss):
        raise TrainingError("non-finite training loss: %r" % loss)
    dlogits = ce_grad_logits(probs, targets)
    grads, dH0 = model.backward_dense(cache, dlogits)
    grads.update(model.embedding_grads(dH0, Xcat))
    optimizer.step(model.params, grads)
    return loss


def predict_proba(model, ds: Dataset) -> np.ndarray:
    """Deterministic evaluation-mode probabilities for every row."""
    return model.forward(reorder_columns(ds))


def reorder_columns(ds: Dataset) -> np.ndarray:
    """Rearrange dataset columns to (numerical..., categorical...) order."""
    order = list(ds.schema.numerical_indices) + list(ds.schema.categorical_indices)
    return ds.values[:, order]


# -- checkpoints ------------------------------------------------------------


def save_model(model: MLPClassifier, path) -> None:
    meta = json.dumps({
        "n_numerical": model.n_numerical,
        "cat_cardinalities": list(model.cat_cardinalities),
        "hidden": list(model.hidden),
        "embedding_dim": model.embedding_dim,
        "seed": model.seed,
        "schema_fingerprint": model.schema_fingerprint,
    })
    arrays = {k: v for k, v in model.params.items()}
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_model(path, expected_fingerprint: str | None = None) -> MLPClassifier:
    if not os.path.exists(path):
        raise StateError("checkpoint not found: %s" % path)
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        model = MLPClassifier(
            n_numerical=meta["n_numerical"],
            cat_cardinalities=meta["cat_cardinalities"],
            hidden=meta["hidden"],
            embedding_dim=meta["embedding_dim"],
            seed=meta["seed"],
            schema_fingerprint=meta["schema_fingerprint"],
        )
        for k in model.params:
            model.params[k] = z[k].astype(np.float64)
    if expected_fingerprint and meta["schema_fingerprint"] != expected_fingerprint:
        raise StateError(
            "checkpoint schema fingerprint %s does not match %s"
            % (meta["schema_fingerprint"], expected_fingerprint)
        )
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
