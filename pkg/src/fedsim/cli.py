"""Command-line experiment runner.

    fedsim run   --config exp.json [--parallel k]
    fedsim eval  --model runs/cell/model.json --suite suite.jsonl --mapping mapping.json
    fedsim synth --out corpus.jsonl --docs 2000 --classes 3 --seed 0

Exit codes: 0 ok, 2 invalid config or mapping, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .data import (DEFAULT_FEATURE_DIM, BinaryMapping, Document, LabelSchema, apply_schema,
                   featurize, filter_longest_percentile, load_corpus, partition_iid, select_split,
                   stratified_split)
from .engine import FedConfig, run_experiment
from .errors import ConfigError, DataError, DivergenceError, LayoutError
from .metrics import functional_eval, load_suite, model_classifier
from .model import Batch, ModelSpec, as_batch, load_model, save_model
from .synthetic import make_synthetic

logger = logging.getLogger("fedsim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
GRID_KEYS = ("algorithm", "client_fraction", "local_epochs", "mu")
_DATA_KEYS = {"corpus", "format", "schema", "clean", "split", "feature_dim", "allow_empty"}
_TOP_KEYS = {"data", "model", "fed", "grid", "output_dir"}


def setup_logging() -> None:
    level = os.environ.get("FEDSIM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- config -----------------------------------------------------------------

@dataclass
class ExperimentFile:
    data: dict
    model: dict
    fed: FedConfig
    grid: dict
    output_dir: Path
    base_dir: Path

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def load_experiment(path) -> ExperimentFile:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    data = raw.get("data")
    if not isinstance(data, dict) or "corpus" not in data:
        raise ConfigError("data.corpus is required")
    bad = set(data) - _DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data keys: {sorted(bad)}")
    split = data.get("split", [0.7, 0.1, 0.2])
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ConfigError(f"data.split must be three ratios summing to 1, got {split}")
    pct = data.get("clean", {}).get("length_percentile")
    if pct is not None and not 0 < pct < 100:
        raise ConfigError("clean.length_percentile must lie in (0, 100)")
    if int(data.get("feature_dim", DEFAULT_FEATURE_DIM)) < 1:
        raise ConfigError("feature_dim must be positive")

    model = dict(raw.get("model", {}))
    if model.get("kind", "logistic_regression") not in ("logistic_regression", "mlp"):
        raise ConfigError(f"unknown model kind {model.get('kind')!r}")

    grid = raw.get("grid") or {}
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ConfigError(f"unsupported grid keys: {sorted(bad)}")
    for key, values in grid.items():
        if not isinstance(values, list):
            raise ConfigError(f"grid.{key} must be a list")

    fed = FedConfig.from_dict(raw.get("fed", {}))
    base = path.parent
    out = Path(raw.get("output_dir", "runs"))
    exp = ExperimentFile(data=data, model=model, fed=fed, grid=grid,
                         output_dir=out if out.is_absolute() else base / out, base_dir=base)
    expand_grid(exp)  # validates every cell up front
    return exp


def cell_name(cfg: FedConfig) -> str:
    return f"{cfg.algorithm}_c{cfg.client_fraction:g}_e{cfg.local_epochs}_mu{cfg.mu:g}"


def expand_grid(exp: ExperimentFile) -> list[FedConfig]:
    """Cartesian product of the grid lists; empty or absent lists use the scalar.

    fedavg cells always run with mu = 0, so duplicate fedavg cells collapse.
    """
    axes = []
    for key in GRID_KEYS:
        values = exp.grid.get(key) or [getattr(exp.fed, key)]
        axes.append(values)
    cells, seen = [], set()
    for combo in itertools.product(*axes):
        overrides = dict(zip(GRID_KEYS, combo))
        if overrides["algorithm"] == "fedavg":
            overrides["mu"] = 0.0
        try:
            cfg = replace(exp.fed, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        name = cell_name(cfg)
        if name not in seen:
            seen.add(name)
            cells.append(cfg)
    return cells


# -- data preparation -------------------------------------------------------

@dataclass
class PreparedData:
    spec: ModelSpec
    class_order: list[str]
    partitions: list[Batch]
    val: Batch
    test: Batch
    counts: dict


def prepare_data(exp: ExperimentFile) -> PreparedData:
    d = exp.data
    paths = d["corpus"] if isinstance(d["corpus"], list) else [d["corpus"]]
    docs: list[Document] = []
    seen: set[str] = set()
    for p in paths:
        try:
            corpus = load_corpus(exp.resolve(p), d.get("format"))
        except FileNotFoundError:
            raise DataError(f"corpus not found: {exp.resolve(p)}") from None
        for doc in corpus:
            if doc.id in seen:
                raise DataError(f"duplicate id {doc.id!r} across corpora")
            seen.add(doc.id)
        docs.extend(corpus)

    clean = d.get("clean", {})
    extra_drops = set(clean.get("drop_classes", []))
    if d.get("schema"):
        try:
            schema = LabelSchema.from_json(exp.resolve(d["schema"]))
        except FileNotFoundError:
            raise DataError(f"schema not found: {exp.resolve(d['schema'])}") from None
        schema = LabelSchema(merges={k: v for k, v in schema.merges.items() if k not in extra_drops},
                             drops=schema.drops | extra_drops, class_order=schema.class_order)
    else:
        schema = LabelSchema.identity(doc.raw_label for doc in docs if doc.raw_label not in extra_drops)
        schema.drops = extra_drops
    docs = apply_schema(docs, schema)
    if clean.get("length_percentile") is not None:
        docs = filter_longest_percentile(docs, clean["length_percentile"])

    seed = exp.fed.seed
    docs = stratified_split(docs, d.get("split", (0.7, 0.1, 0.2)), seed)
    train = select_split(docs, "train")
    parts = partition_iid(train, exp.fed.n_clients, seed)

    feature_dim = int(d.get("feature_dim", DEFAULT_FEATURE_DIM))
    m = exp.model
    spec = ModelSpec(kind=m.get("kind", "logistic_regression"), feature_dim=feature_dim,
                     num_classes=len(schema.class_order), hidden_dim=int(m.get("hidden_dim", 0)))
    allow_empty = bool(d.get("allow_empty", False))

    def feats(ds):
        return as_batch(featurize(ds, feature_dim, spec.num_classes, schema.class_order, allow_empty),
                        feature_dim)

    by_id = {doc.id: doc for doc in train}
    partitions = [feats([by_id[i] for i in sorted(p.example_ids)]) for p in parts]
    counts = {s: len(select_split(docs, s)) for s in ("train", "val", "test")}
    logger.info("data: %s documents, %d classes", counts, spec.num_classes)
    return PreparedData(spec=spec, class_order=list(schema.class_order), partitions=partitions,
                        val=feats(select_split(docs, "val")), test=feats(select_split(docs, "test")),
                        counts=counts)


# -- run --------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_cell(cfg: FedConfig, prepared: PreparedData, out_dir: Path, data_echo: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, prepared.spec, prepared.partitions, prepared.val, prepared.test)
    with (out_dir / "rounds.jsonl").open("w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    save_model(out_dir / "model.json", prepared.spec, result.params, prepared.class_order)
    test = result.test_metrics.summary() if result.test_metrics is not None else None
    summary = {
        "cell": cell_name(cfg),
        "seed": cfg.seed,
        "best_round": result.best_round,
        "best_val_weighted_f1": max(r.val_weighted_f1 for r in result.records),
        "rounds_run": len(result.records),
        "stopped_early": result.stopped_early,
        "test": test,
        "config": {"fed": cfg.to_dict(), "model": prepared.spec.to_dict(),
                   "class_order": prepared.class_order, "data": data_echo},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "summary.json").write_text(_dump(summary))
    return summary


def _run_cell_job(args):
    return run_cell(*args)


def format_table(summaries: list[dict]) -> str:
    width = max([len("cell")] + [len(s["cell"]) for s in summaries])
    lines = [f"{'cell':<{width}}  {'precision':>9}  {'recall':>9}  {'F1':>9}"]
    for s in summaries:
        t = s["test"] or {}
        vals = [t.get(k) for k in ("precision", "recall", "weighted_f1")]
        cols = "  ".join(f"{100 * v:9.2f}" if v is not None else f"{'-':>9}" for v in vals)
        lines.append(f"{s['cell']:<{width}}  {cols}")
    return "\n".join(lines)


def cmd_run(config: str, parallel: int = 1) -> int:
    exp = load_experiment(config)
    cells = expand_grid(exp)
    prepared = prepare_data(exp)
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, prepared, exp.output_dir / cell_name(cfg), exp.data) for cfg in cells]
    logger.info("running %d grid cell(s)", len(jobs))
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            summaries = list(pool.map(_run_cell_job, jobs))
    else:
        summaries = [run_cell(*job) for job in jobs]
    print(format_table(summaries))
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(model_path: str, suite_path: str, mapping_path: str, out: Optional[str] = None) -> int:
    try:
        spec, params, class_order = load_model(model_path)
    except FileNotFoundError as exc:
        raise DataError(f"model not found: {exc.filename}") from None
    try:
        mapping = BinaryMapping.from_json(mapping_path, class_order)
        mapping.validate(class_order)
    except FileNotFoundError:
        raise ConfigError(f"mapping not found: {mapping_path}") from None
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    try:
        cases = load_suite(suite_path)
    except FileNotFoundError:
        raise DataError(f"suite not found: {suite_path}") from None

    results, preds = functional_eval(cases, model_classifier(spec, params, class_order), mapping, class_order)
    out_dir = Path(out) if out else Path(model_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "predictions.jsonl").open("w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({"text": p.text, "functionality": p.functionality, "gold": p.gold,
                                 "predicted_class": p.predicted_class, "predicted": p.predicted,
                                 "correct": p.correct}, ensure_ascii=False, sort_keys=True) + "\n")
    n_total = sum(r.n_cases for r in results.values())
    n_correct = sum(r.n_correct for r in results.values())
    report = {
        "functionalities": {name: {"accuracy": r.accuracy, "n_cases": r.n_cases, "n_correct": r.n_correct}
                            for name, r in results.items()},
        "overall": {"accuracy": n_correct / n_total if n_total else None,
                    "n_cases": n_total, "n_correct": n_correct},
    }
    (out_dir / "hatecheck.json").write_text(_dump(report))

    width = max([len("functionality")] + [len(n) for n in results])
    print(f"{'functionality':<{width}}  {'n':>5}  {'accuracy (%)':>12}")
    for name, r in results.items():
        print(f"{name:<{width}}  {r.n_cases:>5}  {100 * r.accuracy:12.2f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated text-classification simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--parallel", type=int, default=1, help="grid cells to run concurrently")

    p = sub.add_parser("eval", help="functional-test evaluation of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--out", default=None, help="output directory (default: model directory)")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=600)
    p.add_argument("--overlap", type=float, default=0.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        if args.command == "run":
            return cmd_run(args.config, args.parallel)
        if args.command == "eval":
            return cmd_eval(args.model, args.suite, args.mapping, args.out)
        if args.classes < 2:
            raise ConfigError("--classes must be at least 2")
        make_synthetic(args.out, args.docs, args.classes, args.vocab, args.seed, args.overlap)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, LayoutError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        logger.error("numeric divergence: %s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
