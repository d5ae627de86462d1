"""Linear probing on frozen encoder features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, VisibleSet, forward

FEATURE_KINDS = ("reconstructed", "mu_token", "modality_tokens", "register_tokens", "all_hidden")


@dataclass
class LinearProbe:
    weights: np.ndarray  # (F, C)
    bias: np.ndarray  # (C,)
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(features), axis=1)


@dataclass
class ProbeReport:
    accuracy: dict[str, float]
    dims: dict[str, int]
    class_count: int


def extract_features(params: ModelParams, embeddings, visible, kind: str, batch_size: int = 512) -> np.ndarray:
    """Deterministic (epsilon = 0) features for a batch of records, shape (B, F)."""
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}")
    M = params.config.modality_count
    R = params.config.registers
    if kind == "register_tokens" and R == 0:
        raise ValueError("register_tokens requested but the model has no registers")
    vs = VisibleSet(tuple(visible), tuple(range(M)))
    n = len(next(e for e in embeddings if e is not None))
    chunks = []
    for s in range(0, n, batch_size):
        embs = [None if e is None else e[s : s + batch_size] for e in embeddings]
        out = forward(params, embs, vs, rng=None)
        h = out.encoded.hidden.data
        b = h.shape[0]
        if kind == "reconstructed":
            f = np.concatenate([out.reconstructions[m].data for m in range(M)], axis=1)
        elif kind == "mu_token":
            f = h[:, 0, :]
        elif kind == "register_tokens":
            f = h[:, 2 : 2 + R, :].reshape(b, -1)
        elif kind == "modality_tokens":
            f = h[:, 2 + R :, :].reshape(b, -1)
        else:
            f = h.reshape(b, -1)
        chunks.append(f)
    return np.concatenate(chunks, axis=0)


def train_linear_probe(features: np.ndarray, labels: np.ndarray, l2_penalty: float = 1e-4, iterations: int = 500, lr: float = 0.1, class_count: int | None = None) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent on standardized features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = int(class_count or labels.max() + 1)
    if len(np.unique(labels)) < 2:
        raise ValueError("linear probe needs at least two classes")
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    X = (features - mean) / std
    N, F = X.shape
    Y = np.zeros((N, C))
    Y[np.arange(N), labels] = 1.0
    W = np.zeros((F, C))
    b = np.zeros(C)
    for _ in range(iterations):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - Y) / N
        W -= lr * (X.T @ g + l2_penalty * W)
        b -= lr * g.sum(axis=0)
    return LinearProbe(W, b, mean, std)


def evaluate_probe(probe: LinearProbe, features: np.ndarray, labels: np.ndarray) -> float:
    if features.shape[1] != probe.weights.shape[0]:
        raise ValueError(f"feature dim {features.shape[1]} vs probe {probe.weights.shape[0]}")
    return float(np.mean(probe.predict(features) == np.asarray(labels)))


def probe_report(params: ModelParams, train, test, visible, kinds=FEATURE_KINDS, l2_penalty: float = 1e-4) -> ProbeReport:
    """Species top-1 accuracy for each feature kind (train on ``train``, score ``test``)."""
    acc, dims = {}, {}
    C = train.species_count
    for kind in kinds:
        if kind == "register_tokens" and params.config.registers == 0:
            continue
        ftr = extract_features(params, train.embeddings, visible, kind)
        fte = extract_features(params, test.embeddings, visible, kind)
        probe = train_linear_probe(ftr, train.species, l2_penalty, class_count=C)
        acc[kind] = evaluate_probe(probe, fte, test.species)
        dims[kind] = ftr.shape[1]
    return ProbeReport(acc, dims, C)
