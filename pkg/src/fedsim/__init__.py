"""Deterministic federated-learning simulator for text classification."""

from .data import (BinaryMapping, Document, LabelSchema, Partition, apply_schema, featurize,
                   filter_longest_percentile, load_corpus, partition_iid, stratified_split)
from .engine import (ClientUpdate, FedConfig, RoundRecord, ServerState, aggregate_weighted,
                     client_train, run_experiment, sample_clients, server_step_fedopt)
from .metrics import ConfusionMatrix, FunctionalCase, MetricsReport, confusion, functional_eval, weighted_metrics
from .model import (FeaturizedExample, LossReport, ModelSpec, forward, init_params, local_loss_grad,
                    sgd_step)

__version__ = "0.1.0"
