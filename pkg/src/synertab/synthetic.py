"""Synthetic logistic benchmarks for offline runs, demos, and tests."""

from __future__ import annotations

import csv
import os

import numpy as np

from .annotator import SimulatedOracle, SimulatedOracleConfig, sigmoid
from .data import Column, Dataset, FeatureSchema


def make_schema(n_features: int, task_description: str | None = None) -> FeatureSchema:
    columns = tuple(
        Column(name="f%02d" % i, kind="numerical", unit=None) for i in range(n_features)
    )
    return FeatureSchema(
        columns=columns,
        label_column="outcome",
        positive_class_name="positive",
        task_description=task_description
        or "Here are standardized measurements for one case",
    )


def make_logistic_dataset(n_rows: int, n_features: int, seed: int,
                          signal_scale: float = 2.0, bias: float = 0.0):
    """Gaussian features with Bernoulli labels from a random logistic model.

    ``signal_scale`` is the norm of the weight vector, which controls how
    separable the task is (the irreducible-noise ceiling on AUC). Returns
    (Dataset, weights, bias); the weights define the ground truth a
    simulated oracle can be built around.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_rows, n_features))
    w = rng.standard_normal(n_features)
    w = w / np.linalg.norm(w) * signal_scale
    p = sigmoid(X @ w + bias)
    y = (rng.random(n_rows) < p).astype(np.int64)
    schema = make_schema(n_features)
    raw = [tuple(repr(float(v)) for v in row) for row in X]
    ds = Dataset(schema, X, raw, np.arange(n_rows), {}, gold_labels=y)
    return ds, w, bias


def make_oracle(weights, bias: float = 0.0, flip_rate: float = 0.0,
                confidence_noise_sd: float = 0.0, finetune_blend_rate: float = 0.5,
                finetune_logit_cap: float | None = None,
                seed: int = 0) -> SimulatedOracle:
    config = SimulatedOracleConfig(
        weights=tuple(float(v) for v in np.asarray(weights).ravel()),
        bias=float(bias),
        flip_rate=flip_rate,
        confidence_noise_sd=confidence_noise_sd,
        finetune_blend_rate=finetune_blend_rate,
        finetune_logit_cap=finetune_logit_cap,
        seed=seed,
    )
    return SimulatedOracle(config)


def write_dataset_csv(ds: Dataset, path) -> None:
    """Write the dataset (raw cell text plus label names) as a CSV file."""
    schema = ds.schema
    gold = ds.gold_labels
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(schema.feature_names)
        if gold is not None:
            header.append(schema.label_column)
        w.writerow(header)
        negative = "not_" + schema.positive_class_name
        for i, row in enumerate(ds.raw):
            out = list(row)
            if gold is not None:
                out.append(schema.positive_class_name if gold[i] == 1 else negative)
            w.writerow(out)
