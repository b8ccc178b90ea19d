"""Federated round loop: client sampling, local training, FedAvg/FedProx/FedOpt aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DivergenceError, LayoutError
from .metrics import MetricsReport, confusion, weighted_metrics
from .model import (Batch, FeaturizedExample, ModelSpec, as_batch, init_params,
                    local_loss_grad, predict, sgd_step)

logger = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedopt")
SERVER_OPTIMIZERS = ("sgd", "adam", "adagrad")

# stream tags mixed into SeedSequence entropy so the RNG uses never overlap
_SAMPLING_STREAM = 0
_CLIENT_STREAM = 1


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "fedprox"
    n_clients: int = 100
    client_fraction: float = 0.1
    local_epochs: int = 1
    rounds: int = 300
    client_lr: float = 0.01
    mu: float = 0.0
    server_optimizer: str = "adam"
    server_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    tau: float = 1e-8
    batch_size: Optional[int] = 128  # None = full local partition
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "fedavg" and self.mu != 0:
            raise ConfigError("fedavg requires mu = 0")
        if self.server_optimizer not in SERVER_OPTIMIZERS:
            raise ConfigError(f"server_optimizer must be one of {SERVER_OPTIMIZERS}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be at least 1")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if self.local_epochs < 1 or self.rounds < 1:
            raise ConfigError("local_epochs and rounds must be at least 1")
        if self.client_lr <= 0 or self.server_lr <= 0 or self.tau <= 0:
            raise ConfigError("client_lr, server_lr and tau must be positive")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive (or null for full batch)")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")

    @property
    def clients_per_round(self) -> int:
        return clients_per_round(self.n_clients, self.client_fraction)

    @classmethod
    def from_dict(cls, raw: dict) -> "FedConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown fed config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: np.ndarray
    n_samples: int
    train_loss: float = 0.0


@dataclass(frozen=True)
class ServerState:
    params: np.ndarray
    momentum: np.ndarray
    second_moment: np.ndarray
    round: int = 0

    @classmethod
    def fresh(cls, params: np.ndarray) -> "ServerState":
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled_clients: list[int]
    mean_train_loss: float
    val_precision: float
    val_recall: float
    val_weighted_f1: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    params: np.ndarray
    records: list[RoundRecord]
    test_metrics: Optional[MetricsReport]
    best_round: int
    stopped_early: bool
    server_state: Optional[ServerState] = field(default=None, repr=False)


def clients_per_round(n_clients: int, fraction: float) -> int:
    # round away float noise first: 0.3 * 100 must give 30, not 31
    return max(1, math.ceil(round(fraction * n_clients, 9)))


def sample_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """Uniformly sample ceil(fraction * n_clients) distinct client ids, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = clients_per_round(n_clients, fraction)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def round_rng(seed: int, round_no: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _SAMPLING_STREAM, round_no])))


def client_rng(seed: int, round_no: int, client_id: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, _CLIENT_STREAM, round_no, client_id])))


def client_train(spec: ModelSpec, global_params: np.ndarray, data: Union[Batch, Sequence[FeaturizedExample]],
                 cfg: FedConfig, rng: np.random.Generator, client_id: int = 0) -> ClientUpdate:
    """Run ``cfg.local_epochs`` of minibatch SGD on the (possibly proximal) local loss.

    The anchor for the proximal term is ``global_params`` for every epoch.
    Each epoch reshuffles the data with ``rng``; indices inside a minibatch
    are kept in ascending order so a full-batch step sums in data order.
    """
    batch = data if isinstance(data, Batch) else as_batch(data, spec.feature_dim)
    n = len(batch)
    if n == 0:
        raise ValueError(f"client {client_id} has no data")
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    mu = cfg.mu if cfg.algorithm != "fedavg" else 0.0

    params = global_params.copy()
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])
            mb = batch if len(idx) == n else batch.rows(idx)
            report, grad = local_loss_grad(spec, params, mb, mu, global_params)
            losses.append(report.loss)
            params = sgd_step(params, grad, cfg.client_lr, inplace=True)
    if not np.all(np.isfinite(params)):
        raise DivergenceError(f"client {client_id} produced non-finite parameters")
    return ClientUpdate(client_id=client_id, params=params, n_samples=n,
                        train_loss=float(np.mean(losses)))


def aggregate_weighted(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted mean of client params, reduced in client-id order."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shape = ordered[0].params.shape
    for u in ordered:
        if u.params.shape != shape:
            raise LayoutError(f"client {u.client_id} params shape {u.params.shape} != {shape}")
    if len(ordered) == 1:
        return ordered[0].params.copy()
    total = sum(u.n_samples for u in ordered)
    acc = (ordered[0].n_samples / total) * ordered[0].params
    lo = ordered[0].params.copy()
    hi = ordered[0].params.copy()
    for u in ordered[1:]:
        acc += (u.n_samples / total) * u.params
        np.minimum(lo, u.params, out=lo)
        np.maximum(hi, u.params, out=hi)
    # rounding guard: a convex combination must stay inside the client hull
    return np.clip(acc, lo, hi, out=acc)


def server_step_fedopt(state: ServerState, updates: Sequence[ClientUpdate], cfg: FedConfig) -> ServerState:
    """Apply the configured server optimizer to the pseudo-gradient.

    The pseudo-gradient points from the server params to the client average,
    and the server adds a scaled step along it.
    """
    avg = aggregate_weighted(updates)
    delta = avg - state.params
    lr = cfg.server_lr
    m, v = state.momentum, state.second_moment
    if cfg.server_optimizer == "sgd":
        # == params + lr*delta; this form is exact for lr = 1 and for delta = 0
        params = avg - (1.0 - lr) * delta
    elif cfg.server_optimizer == "adam":
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * delta
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * delta * delta
        params = state.params + lr * m / (np.sqrt(v) + cfg.tau)
    else:
        v = v + delta * delta
        params = state.params + lr * delta / (np.sqrt(v) + cfg.tau)
    for name, arr in (("params", params), ("momentum", m), ("second_moment", v)):
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite server {name}")
    return ServerState(params=params, momentum=m, second_moment=v, round=state.round + 1)


def evaluate(spec: ModelSpec, params: np.ndarray, data: Batch) -> MetricsReport:
    return weighted_metrics(confusion(data.y, predict(spec, params, data), spec.num_classes))


class EarlyStopping:
    """Tracks the best validation score; ties keep the earliest round."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_round = 0
        self.best_params: Optional[np.ndarray] = None
        self.stale = 0

    def update(self, round_no: int, score: float, params: np.ndarray) -> bool:
        """Record a round; return True when training should halt."""
        if score > self.best_score:
            self.best_score, self.best_round, self.best_params = score, round_no, params.copy()
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def run_experiment(cfg: FedConfig, spec: ModelSpec,
                   partitions: Sequence[Union[Batch, Sequence[FeaturizedExample]]],
                   val: Union[Batch, Sequence[FeaturizedExample]],
                   test: Union[Batch, Sequence[FeaturizedExample], None] = None,
                   *,
                   initial_params: Optional[np.ndarray] = None,
                   evaluator: Optional[Callable[[np.ndarray], MetricsReport]] = None,
                   on_round: Optional[Callable[[RoundRecord, np.ndarray], None]] = None,
                   ) -> ExperimentResult:
    """Train for up to ``cfg.rounds`` rounds with early stopping on val weighted F1.

    ``evaluator`` replaces the default validation scoring; ``on_round`` is
    called with each record and the global params after aggregation.  The
    returned params are those of the best validation round.
    """
    if len(partitions) != cfg.n_clients:
        raise ConfigError(f"{len(partitions)} partitions for n_clients={cfg.n_clients}")
    client_data = [p if isinstance(p, Batch) else as_batch(p, spec.feature_dim) for p in partitions]
    for k, b in enumerate(client_data):
        if len(b) == 0:
            raise ValueError(f"client {k} has an empty partition")
    val_b = val if isinstance(val, Batch) else as_batch(val, spec.feature_dim)
    if evaluator is None:
        if len(val_b) == 0:
            raise ValueError("empty validation set")
        evaluator = lambda params: evaluate(spec, params, val_b)  # noqa: E731

    params = init_params(spec, cfg.seed) if initial_params is None else initial_params.copy()
    state = ServerState.fresh(params) if cfg.algorithm == "fedopt" else None
    stopper = EarlyStopping(cfg.patience)
    records: list[RoundRecord] = []
    stopped_early = False

    logger.info("starting %s: %d clients, %d per round, e=%d, R=%d%s", cfg.algorithm, cfg.n_clients,
                cfg.clients_per_round, cfg.local_epochs, cfg.rounds,
                f", server={cfg.server_optimizer}" if state is not None else "")
    for r in range(1, cfg.rounds + 1):
        sampled = sample_clients(cfg.n_clients, cfg.client_fraction, round_rng(cfg.seed, r))
        updates = [client_train(spec, params, client_data[k], cfg, client_rng(cfg.seed, r, k), client_id=k)
                   for k in sampled]
        if state is not None:
            state = server_step_fedopt(state, updates, cfg)
            params = state.params
        else:
            params = aggregate_weighted(updates)

        report = evaluator(params)
        rec = RoundRecord(round=r, sampled_clients=sampled,
                          mean_train_loss=float(np.mean([u.train_loss for u in updates])),
                          val_precision=report.weighted_precision, val_recall=report.weighted_recall,
                          val_weighted_f1=report.weighted_f1)
        records.append(rec)
        logger.debug("round %d: loss %.5f val F1 %.4f", r, rec.mean_train_loss, rec.val_weighted_f1)
        if on_round is not None:
            on_round(rec, params)
        if stopper.update(r, rec.val_weighted_f1, params):
            stopped_early = r < cfg.rounds
            if stopped_early:
                logger.info("early stop after round %d (best round %d)", r, stopper.best_round)
            break

    best = stopper.best_params
    test_metrics = None
    if test is not None:
        test_b = test if isinstance(test, Batch) else as_batch(test, spec.feature_dim)
        if len(test_b):
            test_metrics = evaluate(spec, best, test_b)
    return ExperimentResult(params=best, records=records, test_metrics=test_metrics,
                            best_round=stopper.best_round, stopped_early=stopped_early,
                            server_state=state)
