"""Rank-based AUC, reliability bins, Monte-Carlo Shapley values, and
plot-data emission."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .annotator import SoftLabelSet


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative.

    Rank-sum computation with ties at half credit; O(N log N). Raises on
    single-class input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes present")
    ranks = rankdata(scores)  # average ranks resolve ties at half credit
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def random_guessing_baseline(labels, seed: int, trials: int = 1000) -> float:
    """Mean AUC of uniform random scores; a seeded empirical 0.5."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    values = [auc(rng.random(labels.shape[0]), labels) for _ in range(trials)]
    return float(np.mean(values))


@dataclass(frozen=True)
class BinStat:
    low: float
    high: float
    n: int
    accuracy: float | None  # None for empty bins

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "n": self.n, "accuracy": self.accuracy}


DEFAULT_BIN_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def confidence_bin_report(confidences, gold, edges=DEFAULT_BIN_EDGES) -> list[BinStat]:
    """Bucket rows by max confidence; report per-bin hard-label accuracy.

    The last bin is closed on the right so max confidence 1.0 lands in
    it. Bin counts always sum to the rows whose max confidence falls
    inside [edges[0], edges[-1]] (for binary simplex vectors that is all
    of them with the default edges).
    """
    if isinstance(confidences, SoftLabelSet):
        conf = confidences.confidences
        hard = confidences.hard_labels
    else:
        conf = np.asarray(confidences, dtype=np.float64)
        hard = np.argmax(conf, axis=1)
    gold = np.asarray(gold)
    top = conf.max(axis=1)
    correct = hard == gold
    out = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        if i == len(edges) - 2:
            mask = (top >= lo) & (top <= hi)
        else:
            mask = (top >= lo) & (top < hi)
        n = int(mask.sum())
        acc = float(correct[mask].mean()) if n else None
        out.append(BinStat(low=lo, high=hi, n=n, accuracy=acc))
    return out


@dataclass(frozen=True)
class EvalReport:
    auc: float
    n_pos: int
    n_neg: int
    baseline_auc: float
    confidence_bins: tuple[BinStat, ...]
    seed: int
    provenance: str

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "baseline_auc": self.baseline_auc,
            "confidence_bins": [b.to_dict() for b in self.confidence_bins],
            "seed": self.seed,
            "provenance": self.provenance,
        }


def build_eval_report(scores, gold, seed: int = 0, provenance: str = "",
                      baseline_trials: int = 1000) -> EvalReport:
    """Assemble the standard report for a set of positive-class scores."""
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold)
    conf = np.column_stack([1.0 - scores, scores])
    return EvalReport(
        auc=auc(scores, gold),
        n_pos=int((gold == 1).sum()),
        n_neg=int((gold == 0).sum()),
        baseline_auc=random_guessing_baseline(gold, seed, baseline_trials),
        confidence_bins=tuple(confidence_bin_report(conf, gold)),
        seed=seed,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo permutation Shapley values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapleyEstimate:
    values: np.ndarray
    standard_errors: np.ndarray
    mc_samples: int
    seed: int
    feature_names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "standard_errors": self.standard_errors.tolist(),
            "mc_samples": self.mc_samples,
            "seed": self.seed,
            "feature_names": list(self.feature_names),
        }


def mc_shapley(predict, background, x, mc_samples: int, seed: int = 0,
               feature_names=(), batch_iters: int = 256) -> ShapleyEstimate:
    """Permutation-sampling Shapley attribution of ``predict`` at ``x``.

    Each iteration draws a feature permutation and a background row, then
    walks the permutation switching features from the background value to
    the explained row's value; a feature's contribution is the change in
    the predicted positive-class score at its switch. Contributions
    telescope, so the values sum to f(x) minus the average prediction over
    the sampled background rows (the efficiency property).
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    background = np.asarray(background, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    n_features = x.shape[0]
    rng = np.random.default_rng(seed)

    sums = np.zeros(n_features)
    sq_sums = np.zeros(n_features)
    done = 0
    while done < mc_samples:
        iters = min(batch_iters, mc_samples - done)
        z_idx = rng.integers(0, background.shape[0], size=iters)
        rows = []
        perms = np.empty((iters, n_features), dtype=np.int64)
        for i in range(iters):
            perm = rng.permutation(n_features)
            perms[i] = perm
            current = background[z_idx[i]].copy()
            rows.append(current.copy())
            for j in perm:
                current[j] = x[j]
                rows.append(current.copy())
        preds = np.asarray(predict(np.asarray(rows)), dtype=np.float64).ravel()
        per_iter = n_features + 1
        for i in range(iters):
            chunk = preds[i * per_iter:(i + 1) * per_iter]
            deltas = np.diff(chunk)
            sums[perms[i]] += deltas
            sq_sums[perms[i]] += deltas * deltas
        done += iters

    values = sums / mc_samples
    variance = np.maximum(sq_sums / mc_samples - values ** 2, 0.0)
    stderr = np.sqrt(variance / mc_samples)
    return ShapleyEstimate(
        values=values,
        standard_errors=stderr,
        mc_samples=mc_samples,
        seed=seed,
        feature_names=tuple(feature_names),
    )


# ---------------------------------------------------------------------------
# Plot-data emission (comma-separated, stable float text, idempotent)
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(c) for c in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_confidence_bins(bins, path) -> None:
    """Columns: bin_low,bin_high,n,accuracy (accuracy empty when n=0)."""
    _write_rows(path, ["bin_low", "bin_high", "n", "accuracy"],
                [(b.low, b.high, b.n, b.accuracy) for b in bins])


def emit_loop_curves(records, path) -> None:
    """One row per loop: loop,des_accuracy,test_auc,annotator_test_auc."""
    _write_rows(
        path,
        ["loop", "des_accuracy", "test_auc", "annotator_test_auc"],
        [
            (r["t"], r.get("des_accuracy"), r.get("test_auc"), r.get("annotator_test_auc"))
            for r in records
        ],
    )


def emit_shapley(estimate: ShapleyEstimate, path, loop: int | None = None) -> None:
    """One row per feature: [loop,]feature,value,standard_error."""
    names = estimate.feature_names or tuple(
        "feature_%d" % i for i in range(estimate.values.shape[0])
    )
    if loop is None:
        _write_rows(path, ["feature", "value", "standard_error"],
                    list(zip(names, estimate.values, estimate.standard_errors)))
    else:
        _write_rows(path, ["loop", "feature", "value", "standard_error"],
                    [(loop, n, v, s) for n, v, s in
                     zip(names, estimate.values, estimate.standard_errors)])


def emit_plot_data(obj, path, **kwargs) -> None:
    """Dispatch on payload type: bin list, loop records, or Shapley estimate."""
    if isinstance(obj, ShapleyEstimate):
        emit_shapley(obj, path, **kwargs)
    elif obj and isinstance(obj, (list, tuple)) and isinstance(obj[0], BinStat):
        emit_confidence_bins(obj, path)
    elif isinstance(obj, (list, tuple)):
        emit_loop_curves(list(obj), path)
    else:
        raise TypeError("cannot emit plot data for %r" % type(obj))
