"""Noisy-label teaching of the small model pair.

The annotator's soft labels are treated as noisy supervision. After a
plain warmup, each epoch fits a two-component Gaussian mixture to every
row's loss, splits rows into a probably-clean labeled set and a noisy
unlabeled set, and trains each network on the partition induced by the
other one (cross-partitioning keeps the pair diverged). Labeled rows use
confidence-weighted refined targets with cross-entropy; unlabeled rows
use sharpened co-guessed targets with a mean-squared penalty; MixUp
interpolates across the union. High-confidence rows form the early-stop
set that drives both stopping and the sharpening-temperature choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .annotator import SoftLabelSet
from .data import Dataset
from .errors import TrainingError
from .model import (
    Adam,
    MLPClassifier,
    ce_grad_logits,
    class_balance_penalty,
    mse_grad_logits,
    reorder_columns,
    soft_cross_entropy,
    train_step,
)

GMM_VARIANCE_FLOOR = 1e-6
# EM variance regularization on min-max normalized losses; keeps the clean
# component broad enough to admit all well-fitted rows
GMM_REG_COVAR = 5e-4


@dataclass(frozen=True)
class TrainConfig:
    """Teaching hyperparameters; defaults follow the reference settings."""

    learning_rate: float = 1e-4
    batch_size: int = 64
    des_tau: float = 0.9        # annotator-confidence threshold for the early-stop set
    clean_tau: float = 0.9      # GMM clean-posterior threshold for the partition
    lambda_u: float = 25.0
    lambda_u_rampup_epochs: int = 50  # linear ramp 0 -> lambda_u after warmup
    patience_m: int = 5
    sharpen_T_choices: tuple[float, ...] = (0.5, 5.0, 10.0)
    reverse_sharpen_T: float = 0.1
    warmup_epochs: int = 5
    max_epochs: int = 100
    mixup_alpha: float = 4.0
    hidden_sizes: tuple[int, ...] = (64, 64)
    embedding_dim: int = 8
    seed: int = 0
    # ablation switches
    early_stopping: bool = True
    soft_labels: bool = True
    use_mixup: bool = True

    def __post_init__(self):
        if not 0.5 < self.des_tau <= 1.0:
            raise ValueError("des_tau must lie in (0.5, 1]")
        if not 0.5 < self.clean_tau <= 1.0:
            raise ValueError("clean_tau must lie in (0.5, 1]")
        if any(t <= 0 for t in self.sharpen_T_choices) or self.reverse_sharpen_T <= 0:
            raise ValueError("temperatures must be positive")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "des_tau": self.des_tau,
            "clean_tau": self.clean_tau,
            "lambda_u": self.lambda_u,
            "lambda_u_rampup_epochs": self.lambda_u_rampup_epochs,
            "patience_m": self.patience_m,
            "sharpen_T_choices": list(self.sharpen_T_choices),
            "reverse_sharpen_T": self.reverse_sharpen_T,
            "warmup_epochs": self.warmup_epochs,
            "max_epochs": self.max_epochs,
            "mixup_alpha": self.mixup_alpha,
            "hidden_sizes": list(self.hidden_sizes),
            "embedding_dim": self.embedding_dim,
            "seed": self.seed,
            "early_stopping": self.early_stopping,
            "soft_labels": self.soft_labels,
            "use_mixup": self.use_mixup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("sharpen_T_choices", "hidden_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# Pure target-construction operations
# ---------------------------------------------------------------------------


def sharpen(p, T: float):
    """Raise probabilities to 1/T and renormalize; T=1 is the identity."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    q = p ** (1.0 / T)
    return q / q.sum(axis=-1, keepdims=True)


def co_refine(label, w, pred, T: float):
    """Confidence-weighted blend of the noisy label and the model's view."""
    label = np.asarray(label, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == label.ndim - 1:
        w = w[..., None]
    return sharpen(w * label + (1.0 - w) * pred, T)


def co_guess(pred_a, pred_b, T: float):
    """Sharpened mean of the two networks' predictions."""
    mean = (np.asarray(pred_a, dtype=np.float64) + np.asarray(pred_b, dtype=np.float64)) / 2.0
    return sharpen(mean, T)


def mixup(x1, y1, x2, y2, alpha: float, rng: np.random.Generator):
    """Beta-interpolate two batches, biased toward the first one.

    lam is drawn from Beta(alpha, alpha) and replaced by max(lam, 1-lam),
    so the mixed sample always stays closer to (x1, y1).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = float(rng.beta(alpha, alpha))
    lam = max(lam, 1.0 - lam)
    x = lam * np.asarray(x1, dtype=np.float64) + (1.0 - lam) * np.asarray(x2, dtype=np.float64)
    y = lam * np.asarray(y1, dtype=np.float64) + (1.0 - lam) * np.asarray(y2, dtype=np.float64)
    return x, y, lam


# ---------------------------------------------------------------------------
# Loss partitioning
# ---------------------------------------------------------------------------


def per_sample_losses(model, X: np.ndarray, labels: SoftLabelSet):
    """Per-row soft-label fit loss, min-max normalized over the batch.

    The raw loss is the cross-entropy against the soft labels minus each
    row's entropy floor (the KL divergence): identical gradients, but a
    perfectly fitted row scores 0 regardless of how uncertain its label
    is, so clean rows concentrate near the bottom of the range. Returns
    (normalized, raw); a degenerate batch (max == min) maps every row to
    0.5.
    """
    probs = model.forward_dense(model.dense_input(X)[0])[0]
    q = labels.confidences
    raw = soft_cross_entropy(probs, q) - soft_cross_entropy(q, q)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        return np.full(raw.shape, 0.5), raw
    return (raw - lo) / (hi - lo), raw


@dataclass(frozen=True)
class GmmFit:
    """Two-component 1-D Gaussian mixture over per-sample losses."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    clean_component: int
    iterations_run: int
    final_log_likelihood: float
    log_likelihood_trace: tuple[float, ...]
    degenerate: bool = False


def _gmm_log_density(x, means, variances, weights):
    # (N, 2) joint log densities log(w_k) + log N(x; mu_k, var_k)
    x = x[:, None]
    return (
        np.log(weights)[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (x - means[None, :]) ** 2 / variances[None, :]
    )


def fit_gmm_1d(losses, max_iters: int = 100, tol: float = 1e-6, seed: int = 0,
               reg_covar: float = GMM_REG_COVAR) -> GmmFit:
    """EM for a 2-component mixture of the normalized losses.

    Means start at the 25th/75th loss percentiles, weights at 0.5 each.
    Iterates until the log-likelihood improves by less than ``tol`` or
    ``max_iters`` is hit; the trace is recorded so monotonicity can be
    asserted. Component variances are regularized at ``reg_covar`` (and
    never below the 1e-6 hard floor). All-identical losses yield a
    flagged degenerate fit. The ``seed`` argument is kept for interface
    stability; the quartile initialization makes the fit deterministic
    without it.
    """
    del seed
    floor = max(float(reg_covar), GMM_VARIANCE_FLOOR)
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 4:
        raise ValueError("need at least 4 loss values for a mixture fit")
    if float(x.max() - x.min()) <= 0.0:
        return GmmFit(
            means=np.array([x[0], x[0]]),
            variances=np.full(2, floor),
            weights=np.array([0.5, 0.5]),
            clean_component=0,
            iterations_run=0,
            final_log_likelihood=float("nan"),
            log_likelihood_trace=(),
            degenerate=True,
        )

    means = np.percentile(x, [25.0, 75.0]).astype(np.float64)
    if means[0] == means[1]:
        means = np.array([x.min(), x.max()], dtype=np.float64)
    variances = np.full(2, max(float(x.var()), floor))
    weights = np.array([0.5, 0.5])

    trace = []
    prev_ll = -np.inf
    iterations = 0
    for _ in range(max_iters):
        joint = _gmm_log_density(x, means, variances, weights)
        ll = float(logsumexp(joint, axis=1).sum())
        trace.append(ll)
        iterations += 1
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
        # E step
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        # M step
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / x.shape[0]
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        variances = np.maximum(variances, floor)

    return GmmFit(
        means=means,
        variances=variances,
        weights=weights,
        clean_component=int(np.argmin(means)),
        iterations_run=iterations,
        final_log_likelihood=trace[-1],
        log_likelihood_trace=tuple(trace),
        degenerate=False,
    )


def clean_posterior(gmm: GmmFit, losses):
    """Posterior probability of the lower-mean component at each loss."""
    x = np.atleast_1d(np.asarray(losses, dtype=np.float64))
    if gmm.degenerate:
        out = np.full(x.shape, 0.5)
    else:
        joint = _gmm_log_density(x, gmm.means, gmm.variances, gmm.weights)
        out = np.exp(joint[:, gmm.clean_component] - logsumexp(joint, axis=1))
    return out if np.ndim(losses) else float(out[0])


def partition(w, threshold: float):
    """Split row indices into (labeled, unlabeled, fallback_engaged).

    Rows with clean posterior >= threshold are labeled. If none qualify,
    the top ceil(N/10) rows by posterior are promoted and the fallback
    flag is set.
    """
    w = np.asarray(w, dtype=np.float64)
    labeled = np.flatnonzero(w >= threshold)
    fallback = False
    if labeled.size == 0:
        k = int(math.ceil(w.shape[0] / 10.0))
        labeled = np.sort(np.argsort(-w, kind="stable")[:k])
        fallback = True
    mask = np.zeros(w.shape[0], dtype=bool)
    mask[labeled] = True
    return labeled, np.flatnonzero(~mask), fallback


# ---------------------------------------------------------------------------
# Early-stop set and the model pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopSet:
    """High-confidence rows used as a proxy-clean stopping/selection set."""

    indices: np.ndarray   # positions within the training matrix
    ids: np.ndarray       # stable row ids
    hard_labels: np.ndarray
    tau: float

    def __len__(self):
        return self.indices.shape[0]


def select_early_stop_set(labels: SoftLabelSet, ids, tau: float) -> EarlyStopSet:
    conf = labels.confidences
    keep = np.flatnonzero(conf.max(axis=1) >= tau)
    if keep.size == 0:
        raise TrainingError(
            "early-stop set is empty at tau=%.3f; lower des_tau or rerun annotation" % tau
        )
    return EarlyStopSet(
        indices=keep,
        ids=np.asarray(ids)[keep],
        hard_labels=labels.hard_labels[keep],
        tau=tau,
    )


class ModelPair:
    """Two students with distinct seeds; predictions are their mean."""

    def __init__(self, model_a: MLPClassifier, model_b: MLPClassifier):
        if model_a.seed == model_b.seed:
            raise ValueError("pair seeds must differ to keep the networks diverged")
        self.a = model_a
        self.b = model_b

    def predict_dense(self, X: np.ndarray) -> np.ndarray:
        return (self.a.forward(X) + self.b.forward(X)) / 2.0

    def predict(self, ds: Dataset) -> np.ndarray:
        return self.predict_dense(reorder_columns(ds))

    def clone(self) -> "ModelPair":
        return ModelPair(self.a.clone(), self.b.clone())

    @property
    def seeds(self) -> tuple[int, int]:
        return (self.a.seed, self.b.seed)


@dataclass
class EpochDiagnostics:
    epoch: int
    n_labeled: tuple[int, int]
    n_unlabeled: tuple[int, int]
    loss_labeled: float
    loss_unlabeled: float
    des_loss: float
    fallback: tuple[bool, bool]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "n_labeled": list(self.n_labeled),
            "n_unlabeled": list(self.n_unlabeled),
            "loss_labeled": self.loss_labeled,
            "loss_unlabeled": self.loss_unlabeled,
            "des_loss": self.des_loss,
            "fallback": list(self.fallback),
        }


@dataclass
class TeachReport:
    """Everything an operator needs to audit one teaching phase."""

    chosen_T: float
    stop_epoch: int
    best_epoch: int
    best_des_loss: float
    des_size: int
    seeds: tuple[int, int]
    candidate_des_losses: dict[float, float] = field(default_factory=dict)
    epochs: list[EpochDiagnostics] = field(default_factory=list)
    warmup_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chosen_T": self.chosen_T,
            "stop_epoch": self.stop_epoch,
            "best_epoch": self.best_epoch,
            "best_des_loss": self.best_des_loss,
            "des_size": self.des_size,
            "seeds": list(self.seeds),
            "candidate_des_losses": {str(k): v for k, v in self.candidate_des_losses.items()},
            "epochs": [e.to_dict() for e in self.epochs],
            "warmup_losses": self.warmup_losses,
        }


def _derived_seed(base: int, *tags: int) -> list[int]:
    return [int(base) & 0xFFFFFFFF, *[int(t) & 0xFFFFFFFF for t in tags]]


def _cycled_batches(indices, batch_size, n_batches, rng):
    """Yield ``n_batches`` slices, reshuffling whenever the pool wraps."""
    if indices.size == 0:
        for _ in range(n_batches):
            yield indices
        return
    pool = rng.permutation(indices)
    pos = 0
    for _ in range(n_batches):
        if pos + batch_size > pool.size:
            pool = rng.permutation(indices)
            pos = 0
        yield pool[pos:pos + batch_size]
        pos += batch_size


def _train_one_network(net, optimizer, other, X, labels, w_other, labeled_mask,
                       config: TrainConfig, rng, T: float, lambda_u: float):
    """One partition-aware pass: balanced labeled/unlabeled batches.

    Each batch holds half labeled and half unlabeled rows (a side is
    upsampled by cycling when its pool is small), so neither loss term
    drowns the other when the partition is lopsided. The batch count is
    fixed by the full training size: one epoch draws about N rows from
    each stream regardless of the partition shape.
    """
    labeled_idx = np.flatnonzero(labeled_mask)
    unlabeled_idx = np.flatnonzero(~labeled_mask)
    half = max(1, config.batch_size // 2)
    n_batches = max(1, math.ceil(X.shape[0] / half))
    lab_half = half if unlabeled_idx.size else config.batch_size
    unlab_half = half if labeled_idx.size else config.batch_size
    lab_stream = _cycled_batches(labeled_idx, lab_half, n_batches, rng)
    unlab_stream = _cycled_batches(unlabeled_idx, unlab_half, n_batches, rng)
    prior = labels.confidences.mean(axis=0)

    lx_sum, lu_sum, n_done = 0.0, 0.0, 0
    for batch_l, batch_u in zip(lab_stream, unlab_stream):
        batch = np.concatenate([batch_l, batch_u])
        if batch.size < 2:
            continue
        lab = np.zeros(batch.size, dtype=bool)
        lab[:batch_l.size] = True
        Xb = X[batch]

        # target construction (no gradients flow through these)
        pred_self = net.forward(Xb)
        pred_other = other.forward(Xb)
        targets = np.empty((batch.size, 2))
        if lab.any():
            targets[lab] = co_refine(
                labels.confidences[batch[lab]], w_other[batch[lab]], pred_self[lab], T
            )
        if (~lab).any():
            targets[~lab] = co_guess(pred_self[~lab], pred_other[~lab], T)

        H0, Xcat = net.dense_input(Xb)
        if config.use_mixup:
            partner = rng.permutation(batch.size)
            H_mix, y_mix, lam = mixup(H0, targets, H0[partner], targets[partner],
                                      config.mixup_alpha, rng)
            Xcat_b = Xcat[partner]
        else:
            H_mix, y_mix, lam = H0, targets, 1.0
            Xcat_b = None

        probs, cache = net.forward_dense(H_mix)
        dlogits = np.zeros_like(probs)
        lx = lu = 0.0
        if lab.any():
            lx = float(soft_cross_entropy(probs[lab], y_mix[lab]).mean())
            dlogits[lab] = ce_grad_logits(probs[lab], y_mix[lab])
        if (~lab).any():
            diff = probs[~lab] - y_mix[~lab]
            lu = float((diff * diff).mean())
            dlogits[~lab] = lambda_u * mse_grad_logits(probs[~lab], y_mix[~lab])
        # class-balance prior, carried over from the original procedure but
        # anchored at the annotation base rate rather than uniform
        penalty, dpenalty = class_balance_penalty(probs, prior)
        dlogits += dpenalty
        loss = lx + lambda_u * lu + penalty
        if not np.isfinite(loss):
            raise TrainingError("non-finite semi-supervised loss (batch %d)" % n_done)

        grads, dH0 = net.backward_dense(cache, dlogits)
        grads.update(net.embedding_grads(dH0, Xcat, Xcat_b, lam))
        optimizer.step(net.params, grads)

        lx_sum += lx
        lu_sum += lu
        n_done += 1
    mean_lx = lx_sum / n_done if n_done else 0.0
    mean_lu = lu_sum / n_done if n_done else 0.0
    return mean_lx, mean_lu


def semi_supervised_epoch(pair: ModelPair, optimizers, X, labels: SoftLabelSet,
                          config: TrainConfig, rng, epoch: int,
                          des: EarlyStopSet, T: float) -> EpochDiagnostics:
    """One cross-partitioned epoch over the full training matrix."""
    w = {}
    fallback = {}
    masks = {}
    sizes = {}
    for name, net in (("a", pair.a), ("b", pair.b)):
        norm, _ = per_sample_losses(net, X, labels)
        gmm = fit_gmm_1d(norm)
        w[name] = clean_posterior(gmm, norm)
        labeled, unlabeled, fb = partition(w[name], config.clean_tau)
        mask = np.zeros(X.shape[0], dtype=bool)
        mask[labeled] = True
        masks[name] = mask
        sizes[name] = (labeled.size, unlabeled.size)
        fallback[name] = fb

    # fixed-ceiling linear ramp of the unlabeled weight, as in the original
    # loss-partitioned procedure this adapts
    if config.lambda_u_rampup_epochs > 0:
        lambda_u = config.lambda_u * min(1.0, epoch / config.lambda_u_rampup_epochs)
    else:
        lambda_u = config.lambda_u

    # cross-partitioning: each network learns from the other's partition
    lx_a, lu_a = _train_one_network(pair.a, optimizers[0], pair.b, X, labels,
                                    w["b"], masks["b"], config, rng, T, lambda_u)
    lx_b, lu_b = _train_one_network(pair.b, optimizers[1], pair.a, X, labels,
                                    w["a"], masks["a"], config, rng, T, lambda_u)

    des_loss = ensemble_des_loss(pair, X, des)
    return EpochDiagnostics(
        epoch=epoch,
        n_labeled=(sizes["b"][0], sizes["a"][0]),
        n_unlabeled=(sizes["b"][1], sizes["a"][1]),
        loss_labeled=(lx_a + lx_b) / 2.0,
        loss_unlabeled=(lu_a + lu_b) / 2.0,
        des_loss=des_loss,
        fallback=(fallback["b"], fallback["a"]),
    )


def ensemble_des_loss(pair: ModelPair, X, des: EarlyStopSet) -> float:
    """Mean cross-entropy of the ensemble against the hard proxy labels."""
    probs = pair.predict_dense(X[des.indices])
    onehot = np.zeros((len(des), 2))
    onehot[np.arange(len(des)), des.hard_labels] = 1.0
    return float(soft_cross_entropy(probs, onehot).mean())


def ensemble_des_accuracy(pair: ModelPair, X, des: EarlyStopSet) -> float:
    probs = pair.predict_dense(X[des.indices])
    return float((np.argmax(probs, axis=1) == des.hard_labels).mean())


def warmup(pair: ModelPair, optimizers, X, labels: SoftLabelSet,
           config: TrainConfig, rng) -> list[float]:
    """Plain soft-label training on all rows before the first partition."""
    history = []
    for _ in range(config.warmup_epochs):
        for net, opt in ((pair.a, optimizers[0]), (pair.b, optimizers[1])):
            perm = rng.permutation(X.shape[0])
            losses = []
            for start in range(0, X.shape[0], config.batch_size):
                batch = perm[start:start + config.batch_size]
                losses.append(train_step(net, opt, X[batch], labels.confidences[batch]))
            history.append(float(np.mean(losses)))
    return history


def teach(train: Dataset, labels: SoftLabelSet, config: TrainConfig):
    """Full teaching phase: warmup, temperature search, early stopping.

    Runs the semi-supervised procedure once per candidate temperature from
    a shared warmed-up pair and keeps the temperature whose early-stop
    loss ends lowest. Returns (ModelPair, TeachReport).
    """
    if len(labels) != train.n_rows:
        raise ValueError("labels (%d) do not cover train rows (%d)" % (len(labels), train.n_rows))
    if not config.soft_labels:
        labels = labels.hardened()

    des = select_early_stop_set(labels, train.ids, config.des_tau)
    X = reorder_columns(train)

    seed_a = _derived_seed(config.seed, 0xA)
    seed_b = _derived_seed(config.seed, 0xB)
    base_a = MLPClassifier.for_dataset(train, config.hidden_sizes, config.embedding_dim,
                                       seed=np.random.default_rng(seed_a).integers(2**31 - 1))
    base_b = MLPClassifier.for_dataset(train, config.hidden_sizes, config.embedding_dim,
                                       seed=np.random.default_rng(seed_b).integers(2**31 - 1))
    if base_a.seed == base_b.seed:  # astronomically unlikely; keep the invariant anyway
        base_b = MLPClassifier.for_dataset(train, config.hidden_sizes, config.embedding_dim,
                                           seed=base_b.seed + 1)
    warm_pair = ModelPair(base_a, base_b)
    warm_opts = (Adam(base_a.params, config.learning_rate),
                 Adam(base_b.params, config.learning_rate))
    warm_rng = np.random.default_rng(_derived_seed(config.seed, 0x17))
    warmup_losses = warmup(warm_pair, warm_opts, X, labels, config, warm_rng)

    best = None
    candidate_losses = {}
    for t_index, T in enumerate(config.sharpen_T_choices):
        pair = warm_pair.clone()
        opts = (Adam(pair.a.params, config.learning_rate),
                Adam(pair.b.params, config.learning_rate))
        rng = np.random.default_rng(_derived_seed(config.seed, 0x7E, t_index))

        best_loss = np.inf
        best_epoch = 0
        best_state = None
        since_improved = 0
        epochs = []
        stop_epoch = 0
        for epoch in range(1, config.max_epochs + 1):
            diag = semi_supervised_epoch(pair, opts, X, labels, config, rng,
                                         epoch, des, float(T))
            epochs.append(diag)
            stop_epoch = epoch
            if diag.des_loss < best_loss:
                best_loss = diag.des_loss
                best_epoch = epoch
                best_state = pair.clone()
                since_improved = 0
            else:
                since_improved += 1
            if config.early_stopping and since_improved >= config.patience_m:
                break

        if config.early_stopping:
            final_pair = best_state if best_state is not None else pair
            final_loss = best_loss
        else:
            final_pair = pair
            final_loss = epochs[-1].des_loss
        candidate_losses[float(T)] = float(final_loss)
        record = {
            "T": float(T),
            "pair": final_pair,
            "loss": float(final_loss),
            "stop_epoch": stop_epoch,
            "best_epoch": best_epoch if config.early_stopping else stop_epoch,
            "epochs": epochs,
        }
        if best is None or record["loss"] < best["loss"]:
            best = record

    report = TeachReport(
        chosen_T=best["T"],
        stop_epoch=best["stop_epoch"],
        best_epoch=best["best_epoch"],
        best_des_loss=best["loss"],
        des_size=len(des),
        seeds=warm_pair.seeds,
        candidate_des_losses=candidate_losses,
        epochs=best["epochs"],
        warmup_losses=warmup_losses,
    )
    return best["pair"], report
