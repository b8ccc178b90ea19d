"""Corpus ingestion, label-schema merging, cleaning, splitting and featurization."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .model import FeaturizedExample

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_FEATURE_DIM = 2 ** 18

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    raw_label: str
    merged_label: Optional[str] = None
    split: Optional[str] = None

    @property
    def label(self) -> str:
        return self.merged_label if self.merged_label is not None else self.raw_label


class Corpus(list):
    """List of documents that remembers how many empty records were skipped."""

    def __init__(self, docs: Iterable[Document] = (), skipped_empty: int = 0):
        super().__init__(docs)
        self.skipped_empty = skipped_empty


@dataclass
class LabelSchema:
    merges: dict[str, str]
    drops: set[str] = field(default_factory=set)
    class_order: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.drops = set(self.drops)
        missing = sorted(set(self.merges.values()) - set(self.class_order))
        if missing:
            raise DataError(f"merge targets missing from class_order: {missing}")
        clash = sorted(self.drops & set(self.merges))
        if clash:
            raise DataError(f"labels both merged and dropped: {clash}")
        if len(set(self.class_order)) != len(self.class_order):
            raise DataError("class_order contains duplicates")

    @classmethod
    def identity(cls, labels: Iterable[str]) -> "LabelSchema":
        order = sorted(set(labels))
        return cls(merges={lab: lab for lab in order}, class_order=order)

    @classmethod
    def from_json(cls, path) -> "LabelSchema":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(merges=dict(raw["merges"]), drops=set(raw.get("drops", [])),
                       class_order=list(raw["class_order"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: invalid label schema ({exc})") from exc


@dataclass
class BinaryMapping:
    hate_labels: set[str]
    nothate_labels: set[str]

    def validate(self, class_order: Sequence[str]) -> None:
        classes = set(class_order)
        overlap = self.hate_labels & self.nothate_labels
        if overlap:
            raise DataError(f"classes mapped to both hate and not-hate: {sorted(overlap)}")
        unknown = (self.hate_labels | self.nothate_labels) - classes
        if unknown:
            raise DataError(f"unknown class in mapping: {sorted(unknown)}")
        missing = classes - self.hate_labels - self.nothate_labels
        if missing:
            raise DataError(f"mapping missing class: {', '.join(sorted(missing))}")

    def is_hate(self, label: str) -> bool:
        return label in self.hate_labels

    @classmethod
    def from_json(cls, path, class_order: Sequence[str] | None = None) -> "BinaryMapping":
        """Load a mapping; ``nothate_labels`` defaults to the rest of ``class_order``."""
        try:
            raw = json.loads(Path(path).read_text())
            hate = set(raw["hate_labels"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: invalid binary mapping ({exc})") from exc
        if "nothate_labels" in raw:
            nothate = set(raw["nothate_labels"])
        elif class_order is not None:
            nothate = set(class_order) - hate
        else:
            raise DataError(f"{path}: nothate_labels required when class_order is unknown")
        return cls(hate, nothate)


@dataclass(frozen=True)
class Partition:
    client_id: int
    example_ids: list[str]


# -- loading ----------------------------------------------------------------

def _make_doc(rec, where: str) -> Document | None:
    if not isinstance(rec, dict):
        raise DataError(f"{where}: record is not an object")
    try:
        doc_id, text, label = rec["id"], rec["text"], rec["label"]
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc.args[0]!r}") from None
    if doc_id is None or label is None or text is None:
        raise DataError(f"{where}: null id, text or label")
    text = str(text)
    if not text.strip():
        return None
    return Document(id=str(doc_id), text=text, raw_label=str(label))


def load_corpus(path, fmt: str | None = None) -> Corpus:
    """Read a CSV (``id,text,label`` header) or JSONL corpus.

    Records with blank text are skipped and counted in ``Corpus.skipped_empty``.
    Malformed records and duplicate ids raise :class:`DataError` naming the line.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "jsonl"):
        raise DataError(f"{path}: unsupported corpus format {fmt!r}")

    docs: list[Document] = []
    skipped = 0
    seen: set[str] = set()

    def accept(doc, where):
        nonlocal skipped
        if doc is None:
            skipped += 1
            return
        if doc.id in seen:
            raise DataError(f"{where}: duplicate id {doc.id!r}")
        seen.add(doc.id)
        docs.append(doc)

    if fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{path}:{lineno}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
                accept(_make_doc(rec, where), where)
    else:
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"id", "text", "label"} <= set(reader.fieldnames):
                raise DataError(f"{path}:1: header must contain id,text,label")
            for rec in reader:
                where = f"{path}:{reader.line_num}"
                if None in rec or any(v is None for v in rec.values()):
                    raise DataError(f"{where}: wrong number of fields")
                accept(_make_doc(rec, where), where)

    if skipped:
        logger.warning("%s: skipped %d record(s) with empty text", path, skipped)
    return Corpus(docs, skipped_empty=skipped)


def write_corpus(path, docs: Sequence[Document]) -> None:
    """Write documents as CSV or JSONL depending on the file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "text", "label"])
            for d in docs:
                writer.writerow([d.id, d.text, d.raw_label])
    else:
        with path.open("w", encoding="utf-8") as fh:
            for d in docs:
                fh.write(json.dumps({"id": d.id, "text": d.text, "label": d.raw_label},
                                    ensure_ascii=False) + "\n")


# -- cleaning ---------------------------------------------------------------

def apply_schema(docs: Sequence[Document], schema: LabelSchema) -> list[Document]:
    out = []
    for d in docs:
        if d.raw_label in schema.drops:
            continue
        if d.raw_label not in schema.merges:
            raise DataError(f"document {d.id!r}: label {d.raw_label!r} not covered by schema")
        out.append(replace(d, merged_label=schema.merges[d.raw_label]))
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def nearest_rank(values: Sequence[int], percentile: float) -> int:
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return ordered[rank - 1]


def filter_longest_percentile(docs: Sequence[Document], percentile: float) -> list[Document]:
    """Drop documents longer (in word tokens) than the nearest-rank percentile."""
    if not docs:
        raise DataError("cannot filter an empty corpus")
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    lengths = [len(tokenize(d.text)) for d in docs]
    cutoff = nearest_rank(lengths, percentile)
    kept = [d for d, n in zip(docs, lengths) if n <= cutoff]
    logger.info("length filter p%g: cutoff %d tokens, removed %d of %d",
                percentile, cutoff, len(docs) - len(kept), len(docs))
    return kept


# -- splitting --------------------------------------------------------------

def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Apportion ``n`` items by ``ratios``; ties in remainder go to the earlier slot."""
    exact = [Fraction(r).limit_denominator(10 ** 9) * n for r in ratios]
    counts = [math.floor(q) for q in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(docs: Sequence[Document], ratios: Sequence[float] = (0.7, 0.1, 0.2),
                     seed: int = 0) -> list[Document]:
    """Assign train/val/test within each class by largest-remainder rounding.

    Returned documents are ordered by id.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_class: dict[str, list[Document]] = defaultdict(list)
    for d in docs:
        by_class[d.label].append(d)
    small = sorted(lab for lab, ds in by_class.items() if len(ds) < 3)
    if small:
        raise DataError(f"classes with fewer than 3 documents: {small}")

    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda d: d.id)
        perm = rng.permutation(len(members))
        counts = largest_remainder(len(members), ratios)
        bounds = np.cumsum([0] + counts)
        for s, name in enumerate(SPLITS):
            out.extend(replace(members[i], split=name) for i in perm[bounds[s]:bounds[s + 1]])
    return sorted(out, key=lambda d: d.id)


def select_split(docs: Sequence[Document], split: str) -> list[Document]:
    return [d for d in docs if d.split == split]


def partition_iid(train_docs: Sequence[Document], n_clients: int, seed: int = 0) -> list[Partition]:
    """Shuffle and deal documents round-robin to ``n_clients`` clients."""
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if len(train_docs) < n_clients:
        raise DataError(f"{n_clients} clients but only {len(train_docs)} training documents")
    ids = sorted(d.id for d in train_docs)
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(len(ids))
    return [Partition(client_id=k, example_ids=[ids[i] for i in perm[k::n_clients]])
            for k in range(n_clients)]


# -- featurization ----------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_features(text: str, feature_dim: int) -> dict[int, int]:
    counts: dict[int, int] = {}
    for tok in tokenize(text):
        idx = fnv1a_64(tok.encode("utf-8")) % feature_dim
        counts[idx] = counts.get(idx, 0) + 1
    return counts


def featurize(docs: Sequence[Document], feature_dim: int, num_classes: int,
              class_order: Sequence[str], allow_empty: bool = False) -> list[FeaturizedExample]:
    if len(class_order) != num_classes:
        raise DataError(f"class_order has {len(class_order)} labels, expected {num_classes}")
    index = {lab: i for i, lab in enumerate(class_order)}
    out = []
    for d in docs:
        label = d.label
        if label not in index:
            raise DataError(f"document {d.id!r}: label {label!r} not in class_order")
        feats = hash_features(d.text, feature_dim)
        if not feats and not allow_empty:
            raise DataError(f"document {d.id!r} has no tokens")
        out.append(FeaturizedExample(features=feats, label=index[label]))
    return out
