"""Linear and MLP softmax classifiers over hashed sparse features.

Parameters always travel as a flat float64 vector (a "param vector"); the
:class:`ModelSpec` fixes how that vector is cut into named weight and bias
segments.  Every function here is pure: inputs are never mutated and the same
inputs give bit-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import sparse

from .errors import DivergenceError, LayoutError

KINDS = ("logistic_regression", "mlp")
INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    feature_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ValueError("feature_dim and num_classes must be positive")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("mlp requires a positive hidden_dim")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Named segments in storage order."""
        D, C, H = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic_regression":
            return [("W", (C, D)), ("b", (C,))]
        return [("W1", (H, D)), ("b1", (H,)), ("W2", (C, H)), ("b2", (C,))]

    @property
    def n_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Return reshaped views of each segment of ``params``."""
        check_layout(self, params)
        out, offset = {}, 0
        for name, shape in self.layout():
            size = math.prod(shape)
            out[name] = params[offset:offset + size].reshape(shape)
            offset += size
        return out

    def pack(self, segments: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(segments[name], dtype=np.float64).ravel()
                               for name, _ in self.layout()])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FeaturizedExample:
    """Sparse bag of hashed token counts with a class index."""
    features: dict[int, int]
    label: int


@dataclass(frozen=True)
class Batch:
    """Row-stacked examples: CSR feature matrix plus integer labels."""
    X: sparse.csr_matrix
    y: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def rows(self, idx: np.ndarray) -> "Batch":
        return Batch(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class LossReport:
    loss: float
    proximal_component: float


def as_batch(examples: Sequence[FeaturizedExample], feature_dim: int) -> Batch:
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for ex in examples:
        for idx in sorted(ex.features):
            if not 0 <= idx < feature_dim:
                raise LayoutError(f"feature index {idx} outside [0, {feature_dim})")
            indices.append(idx)
            data.append(float(ex.features[idx]))
        indptr.append(len(indices))
    X = sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(examples), feature_dim),
    )
    y = np.fromiter((ex.label for ex in examples), dtype=np.int64, count=len(examples))
    return Batch(X, y)


def _coerce_batch(spec: ModelSpec, batch) -> Batch:
    if isinstance(batch, Batch):
        if batch.X.shape[1] != spec.feature_dim:
            raise LayoutError(f"batch has {batch.X.shape[1]} features, spec has {spec.feature_dim}")
        return batch
    if isinstance(batch, FeaturizedExample):
        batch = [batch]
    return as_batch(batch, spec.feature_dim)


def check_layout(spec: ModelSpec, params: np.ndarray) -> None:
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise LayoutError(f"param vector of shape {params.shape} does not match "
                          f"{spec.kind} layout with {spec.n_params} entries")


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-0.05, 0.05) weights from a Philox stream, zero biases."""
    rng = np.random.Generator(np.random.Philox(seed))
    segments = {}
    for name, shape in spec.layout():
        if name.startswith("b"):
            segments[name] = np.zeros(shape)
        else:
            segments[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return spec.pack(segments)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _active(X: sparse.csr_matrix) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Columns present in ``X`` and ``X`` restricted to them."""
    cols, remap = np.unique(X.indices, return_inverse=True)
    Xs = sparse.csr_matrix((X.data, remap.reshape(-1), X.indptr), shape=(X.shape[0], cols.size))
    return cols, Xs


def _logits(spec: ModelSpec, seg: dict[str, np.ndarray], cols: np.ndarray,
            Xs: sparse.csr_matrix) -> tuple[np.ndarray, np.ndarray | None]:
    if spec.kind == "logistic_regression":
        return np.asarray(Xs @ seg["W"][:, cols].T) + seg["b"], None
    hidden = np.maximum(np.asarray(Xs @ seg["W1"][:, cols].T) + seg["b1"], 0.0)
    return hidden @ seg["W2"].T + seg["b2"], hidden


def predict_proba(spec: ModelSpec, params: np.ndarray, batch) -> np.ndarray:
    """Class probabilities for every row of ``batch``, shape (B, C)."""
    seg = spec.unpack(params)
    b = _coerce_batch(spec, batch)
    logits, _ = _logits(spec, seg, *_active(b.X))
    return _softmax(logits)


def forward(spec: ModelSpec, params: np.ndarray, x: FeaturizedExample) -> np.ndarray:
    return predict_proba(spec, params, [x])[0]


def predict(spec: ModelSpec, params: np.ndarray, batch) -> np.ndarray:
    # np.argmax resolves ties to the lowest class index
    return np.argmax(predict_proba(spec, params, batch), axis=1)


def local_loss_grad(spec: ModelSpec, params: np.ndarray,
                    batch: Union[Batch, Sequence[FeaturizedExample]],
                    mu: float, anchor: np.ndarray) -> tuple[LossReport, np.ndarray]:
    """Mean cross-entropy plus (mu/2)*||params - anchor||^2, and its gradient."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    check_layout(spec, anchor)
    seg = spec.unpack(params)
    b = _coerce_batch(spec, batch)
    n = len(b)
    if n == 0:
        raise ValueError("empty batch")

    cols, Xs = _active(b.X)
    logits, hidden = _logits(spec, seg, cols, Xs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    ce = float(np.mean(log_norm - shifted[rows, b.y]))

    dlogits = np.exp(shifted - log_norm[:, None])
    dlogits[rows, b.y] -= 1.0
    dlogits /= n

    # proximal part is dense; the data part only touches active feature columns
    prox = 0.0
    if mu > 0.0:
        grad = params - anchor
        prox = 0.5 * mu * float(grad @ grad)
        grad *= mu
    else:
        grad = np.zeros(spec.n_params)
    g = spec.unpack(grad)
    if spec.kind == "logistic_regression":
        g["W"][:, cols] += np.asarray(Xs.T @ dlogits).T
        g["b"] += dlogits.sum(axis=0)
    else:
        dhidden = (dlogits @ seg["W2"]) * (hidden > 0.0)
        g["W1"][:, cols] += np.asarray(Xs.T @ dhidden).T
        g["b1"] += dhidden.sum(axis=0)
        g["W2"] += dlogits.T @ hidden
        g["b2"] += dlogits.sum(axis=0)

    loss = ce + prox
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    return LossReport(loss=loss, proximal_component=prox), grad


def sgd_step(params: np.ndarray, gradient: np.ndarray, lr: float, inplace: bool = False) -> np.ndarray:
    """Return ``params - lr * gradient``.

    With ``inplace=True`` the caller hands over both buffers: ``gradient`` is
    scaled in place and ``params`` is overwritten with the result.
    """
    if params.shape != gradient.shape:
        raise LayoutError(f"gradient shape {gradient.shape} != params shape {params.shape}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    # a finite sum rules out inf/nan entries without a full elementwise pass
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(gradient.sum())
    if not math.isfinite(total) and not np.all(np.isfinite(gradient)):
        raise DivergenceError("non-finite gradient entries")
    if inplace:
        gradient *= lr
        params -= gradient
        return params
    return params - lr * gradient


# -- persistence: JSON header + raw little-endian float64 payload -----------

def save_model(path, spec: ModelSpec, params: np.ndarray, class_order: Sequence[str]) -> Path:
    """Write ``<path>`` (JSON header) and ``<path stem>.f64`` (params)."""
    check_layout(spec, params)
    path = Path(path)
    blob = path.with_suffix(".f64")
    blob.write_bytes(np.asarray(params, dtype="<f8").tobytes())
    header = {
        "spec": spec.to_dict(),
        "class_order": list(class_order),
        "params_file": blob.name,
        "n_params": spec.n_params,
    }
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> tuple[ModelSpec, np.ndarray, list[str]]:
    path = Path(path)
    header = json.loads(path.read_text())
    spec = ModelSpec(**header["spec"])
    params = np.frombuffer((path.parent / header["params_file"]).read_bytes(), dtype="<f8")
    params = params.astype(np.float64)
    check_layout(spec, params)
    class_order = list(header["class_order"])
    if len(class_order) != spec.num_classes:
        raise LayoutError(f"class_order has {len(class_order)} entries, model has {spec.num_classes} classes")
    return spec, params, class_order
