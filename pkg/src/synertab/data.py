"""Tabular dataset ingestion, stratified splitting, and preprocessing.

Datasets are immutable after construction. Gold labels, when present, sit
behind an access guard: every read of ``Dataset.gold_labels`` increments
``gold_label_reads``, which lets the loop prove it never peeked.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

NA_TOKENS = frozenset({"", "na", "n/a", "nan", "null", "none", "?"})

COLUMN_KINDS = ("numerical", "categorical")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    unit: str | None = None


@dataclass(frozen=True)
class FeatureSchema:
    """Typed column layout plus the task phrasing used in prompts."""

    columns: tuple[Column, ...]
    label_column: str
    positive_class_name: str
    task_description: str

    def __post_init__(self):
        if not self.columns:
            raise ConfigError("schema needs at least one feature column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature column names in schema")
        if self.label_column in names:
            raise ConfigError("label column %r listed among feature columns" % self.label_column)
        for c in self.columns:
            if c.kind not in COLUMN_KINDS:
                raise ConfigError("column %r has unknown kind %r" % (c.name, c.kind))

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def numerical_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.columns) if c.kind == "numerical")

    @property
    def categorical_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.columns) if c.kind == "categorical")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "columns": [[c.name, c.kind, c.unit] for c in self.columns],
                "label": self.label_column,
                "positive": self.positive_class_name,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "task_description": self.task_description,
            "label_column": self.label_column,
            "positive_class_name": self.positive_class_name,
            "columns": [
                {"name": c.name, "kind": c.kind, "unit": c.unit} for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        try:
            cols = tuple(
                Column(c["name"], c["kind"], c.get("unit")) for c in d["columns"]
            )
            return cls(
                columns=cols,
                label_column=d["label_column"],
                positive_class_name=d["positive_class_name"],
                task_description=d["task_description"],
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError("malformed schema: %s" % exc) from exc


def load_schema(path: str | os.PathLike) -> FeatureSchema:
    """Read a schema from a JSON file (see README for the layout)."""
    if not os.path.exists(path):
        raise ConfigError("schema file not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("schema file %s is not valid JSON: %s" % (path, exc)) from exc
    return FeatureSchema.from_dict(d)


class Dataset:
    """Immutable feature matrix with raw cell text kept for prompt rendering.

    ``values`` holds float64 features in schema column order: numerical
    columns as parsed (later standardized), categorical columns as
    vocabulary indices. ``raw`` keeps the original cell strings so prompts
    can render values with their source precision.
    """

    def __init__(self, schema, values, raw, ids, vocabularies, gold_labels=None):
        values = np.ascontiguousarray(values, dtype=np.float64)
        values.setflags(write=False)
        ids = np.asarray(ids, dtype=np.int64)
        ids.setflags(write=False)
        if values.shape[0] != len(raw) or values.shape[0] != ids.shape[0]:
            raise ValueError("values, raw, ids row counts disagree")
        if values.shape[1] != len(schema.columns):
            raise ValueError("feature count does not match schema")
        if gold_labels is not None:
            gold_labels = np.asarray(gold_labels, dtype=np.int64)
            gold_labels.setflags(write=False)
            if gold_labels.shape[0] != values.shape[0]:
                raise ValueError("gold label count does not match rows")
        self.schema = schema
        self.values = values
        self.raw = tuple(tuple(r) for r in raw)
        self.ids = ids
        self.vocabularies = dict(vocabularies)
        self._gold = gold_labels
        self.gold_label_reads = 0

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def has_gold_labels(self) -> bool:
        return self._gold is not None

    @property
    def gold_labels(self):
        """Guarded access: each read is counted in ``gold_label_reads``."""
        if self._gold is None:
            return None
        self.gold_label_reads += 1
        return self._gold

    def categorical_cardinalities(self) -> tuple[int, ...]:
        return tuple(
            len(self.vocabularies[self.schema.columns[i].name])
            for i in self.schema.categorical_indices
        )

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        gold = None if self._gold is None else self._gold[indices]
        return Dataset(
            self.schema,
            self.values[indices],
            [self.raw[i] for i in indices],
            self.ids[indices],
            self.vocabularies,
            gold,
        )

    def with_values(self, values) -> "Dataset":
        """Same rows/metadata with a replaced feature matrix (no gold reads)."""
        return Dataset(self.schema, values, self.raw, self.ids, self.vocabularies, self._gold)


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: Dataset
    seed: int = 0
    test_fraction: float = 0.2
    stratified: bool = True
    standardizer: "Standardizer | None" = field(default=None, compare=False)


def _parse_cell(token: str, kind: str):
    """Return parsed value or None when the cell counts as missing."""
    token = token.strip()
    if token.lower() in NA_TOKENS:
        return None
    if kind == "numerical":
        try:
            return float(token)
        except ValueError:
            return None  # unparseable numeric cells are treated as missing
    return token


def load_csv(path, schema: FeatureSchema, vocabularies=None) -> Dataset:
    """Load a UTF-8 comma-separated file against ``schema``.

    Rows with any missing feature (or missing label, when the label column
    is present) are dropped. Categorical vocabularies are fitted over the
    surviving rows unless ``vocabularies`` pins them. Row order is
    preserved; ids are the source row positions (0-based, header excluded).
    """
    if not os.path.exists(path):
        raise ConfigError("data file not found: %s" % path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError("empty data file: %s" % path)
        header = [h.strip() for h in header]
        missing_cols = [n for n in schema.feature_names if n not in header]
        if missing_cols:
            raise ConfigError(
                "header of %s lacks schema columns: %s" % (path, ", ".join(missing_cols))
            )
        col_pos = [header.index(n) for n in schema.feature_names]
        label_pos = header.index(schema.label_column) if schema.label_column in header else None

        kept_raw, kept_labels, kept_ids = [], [], []
        for rownum, row in enumerate(reader):
            if len(row) < len(header):
                continue  # short row: some cell is missing
            cells = [_parse_cell(row[p], schema.columns[j].kind) for j, p in enumerate(col_pos)]
            if any(c is None for c in cells):
                continue
            if label_pos is not None:
                label = row[label_pos].strip()
                if label.lower() in NA_TOKENS:
                    continue
                kept_labels.append(label)
            kept_raw.append(tuple(row[p].strip() for p in col_pos))
            kept_ids.append(rownum)

    gold = None
    if label_pos is not None:
        classes = sorted(set(kept_labels))
        if len(classes) > 2:
            raise ConfigError(
                "label column %r has %d classes; binary tasks only"
                % (schema.label_column, len(classes))
            )
        if len(classes) == 2 and schema.positive_class_name not in classes:
            raise ConfigError(
                "positive class %r not among label values %s"
                % (schema.positive_class_name, classes)
            )
        gold = np.array(
            [1 if v == schema.positive_class_name else 0 for v in kept_labels],
            dtype=np.int64,
        )

    if vocabularies is None:
        vocabularies = {}
        for j in schema.categorical_indices:
            name = schema.columns[j].name
            vocabularies[name] = tuple(sorted({r[j] for r in kept_raw}))
    else:
        vocabularies = {k: tuple(v) for k, v in vocabularies.items()}

    n = len(kept_raw)
    values = np.zeros((n, len(schema.columns)))
    for j, col in enumerate(schema.columns):
        if col.kind == "numerical":
            values[:, j] = [float(r[j]) for r in kept_raw]
        else:
            index = {v: i for i, v in enumerate(vocabularies[col.name])}
            try:
                values[:, j] = [index[r[j]] for r in kept_raw]
            except KeyError as exc:
                raise ConfigError(
                    "categorical value %s in column %r outside fitted vocabulary"
                    % (exc, col.name)
                ) from exc

    return Dataset(schema, values, kept_raw, kept_ids, vocabularies, gold)


def _per_class_test_count(n_class: int, fraction: float) -> int:
    return int(np.floor(n_class * fraction + 0.5))


def stratified_split(ds: Dataset, test_fraction: float, seed: int, stratify: bool = True) -> Split:
    """80/20-style split keeping per-class proportions within one sample.

    With ``stratify=False`` (or no gold labels) the split is uniform at
    random. Deterministic given ``seed``.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = ds.n_rows

    if stratify and ds.has_gold_labels:
        gold = ds.gold_labels  # guarded read: splitting is an allowed context
        test_idx = []
        for cls in np.unique(gold):
            members = np.flatnonzero(gold == cls)
            if members.size < 2:
                raise ConfigError("class %d has fewer than 2 samples" % cls)
            k = _per_class_test_count(members.size, test_fraction)
            test_idx.append(rng.permutation(members)[:k])
        test_idx = np.sort(np.concatenate(test_idx))
        stratified = True
    else:
        k = _per_class_test_count(n, test_fraction)
        test_idx = np.sort(rng.permutation(n)[:k])
        stratified = False

    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    train_idx = np.flatnonzero(~mask)
    return Split(
        train=ds.subset(train_idx),
        test=ds.subset(test_idx),
        seed=seed,
        test_fraction=test_fraction,
        stratified=stratified,
    )


@dataclass(frozen=True)
class Standardizer:
    """Per-numerical-column (x - mean) / std transform fitted on train rows."""

    columns: tuple[int, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]  # zero-variance columns carry std 0 and map to 0

    def apply(self, ds: Dataset) -> Dataset:
        values = np.array(ds.values)
        for j, mu, sd in zip(self.columns, self.means, self.stds):
            if sd == 0.0:
                values[:, j] = 0.0
            else:
                values[:, j] = (values[:, j] - mu) / sd
        return ds.with_values(values)


def fit_standardizer(train: Dataset) -> Standardizer:
    cols = train.schema.numerical_indices
    means, stds = [], []
    for j in cols:
        col = train.values[:, j]
        mu = float(col.mean())
        sd = float(col.std())  # population std
        if sd == 0.0:
            warnings.warn(
                "column %r has zero variance on train; mapped to constant 0"
                % train.schema.columns[j].name
            )
        means.append(mu)
        stds.append(sd)
    return Standardizer(columns=cols, means=tuple(means), stds=tuple(stds))


def standardize(split: Split) -> Split:
    """Standardize numerical columns with train statistics; test reuses them."""
    std = fit_standardizer(split.train)
    return Split(
        train=std.apply(split.train),
        test=std.apply(split.test),
        seed=split.seed,
        test_fraction=split.test_fraction,
        stratified=split.stratified,
        standardizer=std,
    )


def save_split(split: Split, directory, source_csv: str | None = None) -> None:
    """Persist a split as train.csv / test.csv plus split.json metadata.

    The CSVs keep the original cell text; split.json records the seed, the
    fitted vocabularies, and the id partition so reloads are exact.
    """
    os.makedirs(directory, exist_ok=True)
    schema = split.train.schema

    def write_ds(ds: Dataset, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = list(schema.feature_names)
            gold = ds.gold_labels  # allowed: persisting what ingest already held
            if gold is not None:
                header.append(schema.label_column)
            w.writerow(header)
            negative = "not_" + schema.positive_class_name
            for i, row in enumerate(ds.raw):
                out = list(row)
                if gold is not None:
                    out.append(schema.positive_class_name if gold[i] == 1 else negative)
                w.writerow(out)

    write_ds(split.train, os.path.join(directory, "train.csv"))
    write_ds(split.test, os.path.join(directory, "test.csv"))
    meta = {
        "seed": split.seed,
        "test_fraction": split.test_fraction,
        "stratified": split.stratified,
        "schema": schema.to_dict(),
        "vocabularies": {k: list(v) for k, v in split.train.vocabularies.items()},
        "train_ids": split.train.ids.tolist(),
        "test_ids": split.test.ids.tolist(),
        "source_csv": source_csv,
    }
    with open(os.path.join(directory, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_split(directory) -> Split:
    meta_path = os.path.join(directory, "split.json")
    if not os.path.exists(meta_path):
        raise ConfigError("no split.json under %s; run ingest first" % directory)
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    schema = FeatureSchema.from_dict(meta["schema"])
    vocab = {k: tuple(v) for k, v in meta["vocabularies"].items()}
    train = load_csv(os.path.join(directory, "train.csv"), schema, vocabularies=vocab)
    test = load_csv(os.path.join(directory, "test.csv"), schema, vocabularies=vocab)
    train = Dataset(schema, train.values, train.raw, meta["train_ids"], vocab, train._gold)
    test = Dataset(schema, test.values, test.raw, meta["test_ids"], vocab, test._gold)
    return Split(
        train=train,
        test=test,
        seed=meta["seed"],
        test_fraction=meta["test_fraction"],
        stratified=meta["stratified"],
    )
