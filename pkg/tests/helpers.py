"""Shared test helpers and independent oracles."""

import numpy as np

from fedsim.data import (LabelSchema, apply_schema, featurize, partition_iid, select_split,
                         stratified_split)
from fedsim.model import FeaturizedExample, ModelSpec, as_batch
from fedsim.synthetic import make_documents


def random_examples(rng, n, feature_dim, num_classes, max_nnz=3):
    out = []
    for _ in range(n):
        k = int(rng.integers(1, min(max_nnz, feature_dim) + 1))
        idx = rng.choice(feature_dim, size=k, replace=False)
        feats = {int(i): int(rng.integers(1, 4)) for i in idx}
        out.append(FeaturizedExample(feats, int(rng.integers(num_classes))))
    return out


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def build_federated(n_docs, n_classes, n_clients, feature_dim, seed=0, overlap=0.0):
    """Synthetic corpus -> (spec, client batches, val batch, test batch)."""
    docs = make_documents(n_docs, n_classes, seed=seed, overlap=overlap)
    docs = apply_schema(docs, LabelSchema.identity(d.raw_label for d in docs))
    order = sorted({d.label for d in docs})
    docs = stratified_split(docs, seed=seed)
    train = select_split(docs, "train")
    by_id = {d.id: d for d in train}
    spec = ModelSpec("logistic_regression", feature_dim, n_classes)

    def feats(ds):
        return as_batch(featurize(ds, feature_dim, n_classes, order), feature_dim)

    parts = [feats([by_id[i] for i in sorted(p.example_ids)])
             for p in partition_iid(train, n_clients, seed)]
    return spec, parts, feats(select_split(docs, "val")), feats(select_split(docs, "test"))


def dense_matrix(batch):
    return np.asarray(batch.X.todense()), np.asarray(batch.y)


def centralized_gd(X, y, W, b, lr, steps):
    """Plain dense full-batch softmax-regression gradient descent; returns flat params per step."""
    n, C = X.shape[0], W.shape[0]
    onehot = np.eye(C)[y]
    W, b = W.copy(), b.copy()
    out = []
    for _ in range(steps):
        Z = X @ W.T + b
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - onehot) / n
        W = W - lr * (G.T @ X)
        b = b - lr * G.sum(axis=0)
        out.append(np.concatenate([W.ravel(), b]))
    return out


def weighted_sum_oracle(vectors, weights):
    """Coordinate-wise exactly-rounded weighted mean via math.fsum."""
    import math
    total = sum(weights)
    return np.array([math.fsum(w * v[i] for v, w in zip(vectors, weights)) / total
                     for i in range(len(vectors[0]))])


def fake_report(f1):
    from fedsim.metrics import MetricsReport
    z = np.zeros(1)
    return MetricsReport(z, z, z, z, weighted_precision=f1, weighted_recall=f1, weighted_f1=f1)
