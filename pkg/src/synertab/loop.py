"""End-to-end iteration: annotate, teach, quality-control, reverse-tune.

Every phase's artifacts are persisted under a state directory with
atomic writes and sha256 sidecars, so an interrupted run resumes at the
recorded phase and reproduces the uninterrupted result given the same
seeds and a deterministic provider.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .annotator import SoftLabelSet, annotate_dataset, build_finetune_corpus, finetune
from .data import Dataset, Split, standardize
from .errors import ConfigError, StateError
from .metrics import auc
from .model import file_sha256, load_model, reorder_columns, save_model
from .teaching import (
    ModelPair,
    TrainConfig,
    ensemble_des_accuracy,
    select_early_stop_set,
    sharpen,
    teach,
)

POLICY_KINDS = ("metric_based", "external_validation", "rule_based")


@dataclass(frozen=True)
class QualityControlPolicy:
    """Loop-exit rule: epsilon-improvement on a metric, or a fixed count.

    ``max_loops`` is the iteration bound for rule_based control and a
    safety cap for the other kinds.
    """

    kind: str
    max_loops: int | None = 10
    epsilon: float = 0.001
    holdout: Dataset | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError("unknown policy kind %r" % self.kind)
        if self.kind == "rule_based" and (self.max_loops is None or self.max_loops < 1):
            raise ConfigError("rule_based control needs max_loops >= 1")
        if self.kind == "external_validation" and self.holdout is None:
            raise ConfigError("external_validation control needs a labeled holdout")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "max_loops": self.max_loops, "epsilon": self.epsilon}


@dataclass
class LoopRecord:
    t: int
    des_accuracy: float
    des_loss: float
    des_size: int
    chosen_T: float
    stop_epoch: int
    provider_identity: str
    test_auc: float | None = None
    annotator_test_auc: float | None = None
    holdout_auc: float | None = None
    decision: str = ""
    rationale: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "LoopRecord":
        return cls(**d)


def evaluate_policy(policy: QualityControlPolicy, records: list[LoopRecord]):
    """Decide whether the loop continues after the latest record."""
    if not records:
        raise ValueError("policy needs at least one completed loop")
    t = records[-1].t
    if policy.max_loops is not None and t >= policy.max_loops:
        return False, "loop bound reached (t=%d, max_loops=%d)" % (t, policy.max_loops)
    if policy.kind == "rule_based":
        return True, "t=%d below max_loops=%d" % (t, policy.max_loops)

    metric = "des_accuracy" if policy.kind == "metric_based" else "holdout_auc"
    current = getattr(records[-1], metric)
    if current is None:
        raise ConfigError("policy metric %s missing from loop record" % metric)
    if len(records) == 1:
        return True, "first loop; no baseline for %s yet" % metric
    previous = getattr(records[-2], metric)
    gain = current - previous
    if gain > policy.epsilon:
        return True, "%s improved %.4f -> %.4f (epsilon %.4f)" % (
            metric, previous, current, policy.epsilon)
    return False, "%s gain %.4f within epsilon %.4f" % (metric, gain, policy.epsilon)


@dataclass
class LoopState:
    base_seed: int
    config: TrainConfig
    policy_meta: dict
    allow_gold_labels: bool
    records: list[LoopRecord] = field(default_factory=list)
    annotate_calls: int = 0
    finetune_calls: int = 0
    eval_annotations: int = 0
    provider_identities: list[str] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.records)


@dataclass
class LoopResult:
    predictions: np.ndarray  # (N_test, 2)
    state: LoopState
    pair: ModelPair


# ---------------------------------------------------------------------------
# State directory plumbing
# ---------------------------------------------------------------------------


class StateStore:
    """Atomic JSON/npz persistence with sha256 sidecars."""

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    def path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def exists(self, rel: str) -> bool:
        return os.path.exists(self.path(rel))

    def _finalize(self, tmp: str, final: str) -> None:
        os.replace(tmp, final)
        digest = file_sha256(final)
        side_tmp = final + ".sha256.tmp"
        with open(side_tmp, "w", encoding="utf-8") as fh:
            fh.write(digest + "\n")
        os.replace(side_tmp, final + ".sha256")

    def _verify(self, final: str) -> None:
        side = final + ".sha256"
        if not os.path.exists(side):
            raise StateError("missing checksum for %s" % final)
        with open(side, "r", encoding="utf-8") as fh:
            expected = fh.read().strip()
        actual = file_sha256(final)
        if actual != expected:
            raise StateError("checksum mismatch for %s" % final)

    def write_json(self, rel: str, obj) -> None:
        final = self.path(rel)
        os.makedirs(os.path.dirname(final) or self.root, exist_ok=True)
        tmp = final + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(obj, fh)
        self._finalize(tmp, final)

    def read_json(self, rel: str):
        final = self.path(rel)
        if not os.path.exists(final):
            raise StateError("missing state file %s" % final)
        self._verify(final)
        with open(final, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def write_model(self, rel: str, model) -> None:
        final = self.path(rel)
        os.makedirs(os.path.dirname(final) or self.root, exist_ok=True)
        tmp = final + ".tmp.npz"
        save_model(model, tmp)
        self._finalize(tmp, final)

    def read_model(self, rel: str, expected_fingerprint=None):
        final = self.path(rel)
        self._verify(final)
        return load_model(final, expected_fingerprint)

    def write_array(self, rel: str, **arrays) -> None:
        final = self.path(rel)
        tmp = final + ".tmp.npz"
        np.savez(tmp, **arrays)
        self._finalize(tmp, final)

    def read_array(self, rel: str) -> dict:
        final = self.path(rel)
        self._verify(final)
        with np.load(final) as z:
            return {k: z[k] for k in z.files}


def acquire_lock(directory) -> str:
    """Create an exclusive .lock file; raises StateError when held."""
    os.makedirs(directory, exist_ok=True)
    lock = os.path.join(directory, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError("state directory %s is locked by another run" % directory)
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    return lock


def release_lock(lock_path) -> None:
    if lock_path and os.path.exists(lock_path):
        os.remove(lock_path)


def _loop_dir(t: int) -> str:
    return "loop_%04d" % t


def _provider_file(t: int) -> str:
    return "provider_%04d.json" % t


def derive_seed(base: int, *tags: int) -> int:
    return int(np.random.default_rng([int(base) & 0xFFFFFFFF,
                                      *[int(x) & 0xFFFFFFFF for x in tags]]).integers(2**31 - 1))


# ---------------------------------------------------------------------------
# The loop itself
# ---------------------------------------------------------------------------


def _annotator_test_scores(provider, ds: Dataset, retry_limit: int) -> np.ndarray:
    """Evaluation-only scoring pass (not an annotation round)."""
    return annotate_dataset(provider, ds, retry_limit, loop_index=0).positive


def run_loop(
    split: Split,
    provider,
    policy: QualityControlPolicy,
    config: TrainConfig,
    *,
    allow_gold_labels: bool = True,
    retry_limit: int = 2,
    state_dir=None,
    resume: bool = False,
) -> LoopResult:
    """Drive annotate -> teach -> control -> reverse-tune to termination.

    With ``state_dir`` set, each phase is persisted as it completes; a
    rerun with ``resume=True`` picks up at the first missing artifact.
    Gold labels are only read for the optional evaluation metrics, and
    only when ``allow_gold_labels`` is true.
    """
    store = StateStore(state_dir) if state_dir is not None else None
    meta = {
        "version": __version__,
        "base_seed": config.seed,
        "train_config": config.to_dict(),
        "policy": policy.to_dict(),
        "allow_gold_labels": allow_gold_labels,
    }
    if store is not None:
        if store.exists("state.json"):
            if not resume:
                raise StateError(
                    "state directory %s already holds a run; pass resume=True" % store.root
                )
            existing = store.read_json("state.json")
            if existing.get("version") != __version__:
                raise StateError(
                    "state written by version %r, running %r"
                    % (existing.get("version"), __version__)
                )
            if existing.get("train_config") != meta["train_config"] or \
                    existing.get("policy") != meta["policy"]:
                raise StateError("state directory configuration does not match this run")
        else:
            store.write_json("state.json", meta)
            store.write_json(_provider_file(0), provider.state_dict())

    state = LoopState(
        base_seed=config.seed,
        config=config,
        policy_meta=policy.to_dict(),
        allow_gold_labels=allow_gold_labels,
    )

    std_split = standardize(split)
    holdout_std = None
    if policy.kind == "external_validation":
        holdout_std = std_split.standardizer.apply(policy.holdout)

    # Resume scan: replay completed loops from disk.
    t = 1
    current_provider = provider
    finished = False
    pending_finetune = False
    pair = None
    if store is not None:
        while store.exists(_loop_dir(t) + "/record.json"):
            record = LoopRecord.from_dict(store.read_json(_loop_dir(t) + "/record.json"))
            state.records.append(record)
            state.provider_identities.append(record.provider_identity)
            state.annotate_calls += 1  # credit work done by the interrupted process
            if record.decision == "stop":
                finished = True
                break
            if store.exists(_provider_file(t)):
                current_provider = provider.with_state(store.read_json(_provider_file(t)))
                state.finetune_calls += 1
                t += 1
            else:
                pending_finetune = True
                break

    fp = split.train.schema.fingerprint()
    if finished:
        pair = ModelPair(
            store.read_model(_loop_dir(state.t) + "/model_a.npz", fp),
            store.read_model(_loop_dir(state.t) + "/model_b.npz", fp),
        )
        predictions = pair.predict(std_split.test)
        return LoopResult(predictions=predictions, state=state, pair=pair)

    if pending_finetune:
        pair = ModelPair(
            store.read_model(_loop_dir(t) + "/model_a.npz", fp),
            store.read_model(_loop_dir(t) + "/model_b.npz", fp),
        )
        current_provider = _reverse_tune(
            current_provider, pair, split, std_split, config, state, store
        )
        t += 1

    while True:
        loopdir = _loop_dir(t)
        loop_config = TrainConfig.from_dict(
            {**config.to_dict(), "seed": derive_seed(config.seed, t)}
        )

        # -- annotate (Algorithm line: soft pseudo labeling) --------------
        if store is not None and store.exists(loopdir + "/annotations.json"):
            labels = SoftLabelSet.from_dict(store.read_json(loopdir + "/annotations.json"))
            state.annotate_calls += 1  # the stored pass happened in a prior process
        else:
            labels = annotate_dataset(current_provider, split.train, retry_limit,
                                      loop_index=t)
            state.annotate_calls += 1
            if store is not None:
                store.write_json(loopdir + "/annotations.json", labels.to_dict())

        # -- teach ---------------------------------------------------------
        pair, report = teach(std_split.train, labels, loop_config)
        chosen_report = report
        if store is not None:
            store.write_model(loopdir + "/model_a.npz", pair.a)
            store.write_model(loopdir + "/model_b.npz", pair.b)
            store.write_json(loopdir + "/teach_report.json", report.to_dict())

        # -- metrics + policy ----------------------------------------------
        des = select_early_stop_set(labels, split.train.ids, config.des_tau)
        X_std = reorder_columns(std_split.train)
        record = LoopRecord(
            t=t,
            des_accuracy=ensemble_des_accuracy(pair, X_std, des),
            des_loss=report.best_des_loss,
            des_size=len(des),
            chosen_T=report.chosen_T,
            stop_epoch=report.stop_epoch,
            provider_identity=current_provider.identity,
        )
        if allow_gold_labels and split.test.has_gold_labels:
            record.test_auc = auc(pair.predict(std_split.test)[:, 1], split.test.gold_labels)
            record.annotator_test_auc = auc(
                _annotator_test_scores(current_provider, split.test, retry_limit),
                split.test.gold_labels,
            )
            state.eval_annotations += 1
        if holdout_std is not None:
            record.holdout_auc = auc(pair.predict(holdout_std)[:, 1],
                                     policy.holdout.gold_labels)
        cont, rationale = evaluate_policy(policy, state.records + [record])
        record.decision = "continue" if cont else "stop"
        record.rationale = rationale
        state.records.append(record)
        state.provider_identities.append(current_provider.identity)
        if store is not None:
            store.write_json(loopdir + "/record.json", record.to_dict())

        if not cont:
            break

        # -- reverse-tune ----------------------------------------------------
        current_provider = _reverse_tune(
            current_provider, pair, split, std_split, config, state, store
        )
        t += 1

    predictions = pair.predict(std_split.test)
    if store is not None:
        store.write_array("final_predictions.npz",
                          scores=predictions, ids=split.test.ids)
    return LoopResult(predictions=predictions, state=state, pair=pair)


def _reverse_tune(provider, pair: ModelPair, split: Split, std_split: Split,
                  config: TrainConfig, state: LoopState, store) -> object:
    """Sharpen the student's train predictions and fine-tune the provider."""
    train_preds = pair.predict(std_split.train)
    sharpened = sharpen(train_preds, config.reverse_sharpen_T)
    corpus = build_finetune_corpus(split.train, sharpened)
    tuned = finetune(provider, corpus)
    state.finetune_calls += 1
    if store is not None:
        store.write_json(_provider_file(state.t), tuned.state_dict())
    return tuned


def restore_records(state_dir) -> list[LoopRecord]:
    """Read back the per-loop records of a persisted run."""
    store = StateStore(state_dir)
    records = []
    t = 1
    while store.exists(_loop_dir(t) + "/record.json"):
        records.append(LoopRecord.from_dict(store.read_json(_loop_dir(t) + "/record.json")))
        t += 1
    return records


def load_final_pair(state_dir, schema_fingerprint=None) -> tuple[ModelPair, int]:
    """Load the newest persisted model pair; returns (pair, loop index)."""
    store = StateStore(state_dir)
    t = 0
    while store.exists(_loop_dir(t + 1) + "/model_a.npz"):
        t += 1
    if t == 0:
        raise StateError("no model checkpoints under %s" % state_dir)
    pair = ModelPair(
        store.read_model(_loop_dir(t) + "/model_a.npz", schema_fingerprint),
        store.read_model(_loop_dir(t) + "/model_b.npz", schema_fingerprint),
    )
    return pair, t
