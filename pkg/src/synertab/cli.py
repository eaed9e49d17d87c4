"""Batch entry point wiring configuration files to the pipeline stages.

Subcommands: ingest, annotate, teach, loop, eval, shapley, plot.
Exit codes: 0 success, 2 configuration, 3 provider, 4 training,
5 persisted-state problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .annotator import (
    NetworkProvider,
    SimulatedOracle,
    SoftLabelSet,
    annotate_dataset,
    load_oracle_config,
)
from .data import load_csv, load_schema, load_split, save_split, standardize, stratified_split
from .errors import ConfigError, ProviderError, StateError, SynertabError, TrainingError
from .loop import (
    QualityControlPolicy,
    StateStore,
    acquire_lock,
    load_final_pair,
    release_lock,
    restore_records,
    run_loop,
)
from .metrics import (
    build_eval_report,
    confidence_bin_report,
    emit_confidence_bins,
    emit_loop_curves,
    emit_shapley,
    mc_shapley,
)
from .model import reorder_columns
from .teaching import TrainConfig, teach

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_TRAINING = 4
EXIT_STATE = 5

ABLATIONS = ("no-early-stopping", "hard-labels", "no-mixup")


def load_config(path) -> dict:
    if not path or not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config %s is not valid JSON: %s" % (path, exc)) from exc


def build_train_config(cfg: dict, args) -> TrainConfig:
    overrides = dict(cfg.get("train", {}))
    overrides.setdefault("seed", cfg.get("seed", 0))
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag in args.ablate or []:
        if flag == "no-early-stopping":
            overrides["early_stopping"] = False
        elif flag == "hard-labels":
            overrides["soft_labels"] = False
        elif flag == "no-mixup":
            overrides["use_mixup"] = False
    try:
        return TrainConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError("bad train configuration: %s" % exc) from exc


def build_provider(cfg: dict):
    block = cfg.get("provider")
    if not block or "kind" not in block:
        raise ConfigError("config needs a provider block with a kind")
    if block["kind"] == "simulated":
        path = block.get("oracle_config")
        if not path:
            raise ConfigError("simulated provider needs oracle_config path")
        return SimulatedOracle(load_oracle_config(path))
    if block["kind"] == "network":
        for key in ("endpoint", "model"):
            if key not in block:
                raise ConfigError("network provider needs %r" % key)
        return NetworkProvider(
            endpoint=block["endpoint"],
            model=block["model"],
            key_env=block.get("key_env", "SYNERTAB_API_KEY"),
            temperature=block.get("temperature", 0.0),
        )
    raise ConfigError("unknown provider kind %r" % block["kind"])


def build_policy(cfg: dict, state_dir) -> QualityControlPolicy:
    block = dict(cfg.get("policy", {"kind": "rule_based", "max_loops": 1}))
    holdout = None
    if block.get("kind") == "external_validation":
        holdout_csv = block.pop("holdout_csv", None)
        if not holdout_csv:
            raise ConfigError("external_validation policy needs holdout_csv")
        schema = load_schema(cfg["schema_file"])
        vocab = _split_vocab(state_dir)
        holdout = load_csv(holdout_csv, schema, vocabularies=vocab)
    block.pop("holdout_csv", None)
    try:
        return QualityControlPolicy(holdout=holdout, **block)
    except TypeError as exc:
        raise ConfigError("bad policy block: %s" % exc) from exc


def _split_vocab(state_dir):
    meta = os.path.join(state_dir, "split", "split.json")
    if os.path.exists(meta):
        with open(meta, "r", encoding="utf-8") as fh:
            return {k: tuple(v) for k, v in json.load(fh)["vocabularies"].items()}
    return None


def _state_dir(cfg: dict, args) -> str:
    state_dir = args.state_dir or cfg.get("state_dir")
    if not state_dir:
        raise ConfigError("no state_dir in config or --state-dir flag")
    return state_dir


def _output_dir(cfg: dict, state_dir: str) -> str:
    out = cfg.get("output_dir") or os.path.join(state_dir, "out")
    os.makedirs(out, exist_ok=True)
    return out


def _load_split(state_dir):
    return load_split(os.path.join(state_dir, "split"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    schema = load_schema(cfg["schema_file"])
    ds = load_csv(cfg["data_csv"], schema)
    split_cfg = cfg.get("split", {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    split = stratified_split(
        ds,
        test_fraction=split_cfg.get("test_fraction", 0.2),
        seed=seed,
        stratify=split_cfg.get("stratify", True),
    )
    save_split(split, os.path.join(state_dir, "split"), source_csv=cfg["data_csv"])
    n, f = ds.n_rows, ds.n_features
    line = "ingested %d rows x %d features -> train %d / test %d (seed %d)" % (
        n, f, split.train.n_rows, split.test.n_rows, seed)
    if ds.has_gold_labels:
        gold = ds.gold_labels
        pos, neg = int((gold == 1).sum()), int((gold == 0).sum())
        line += "; P/N %.2f" % (pos / neg if neg else float("inf"))
    print(line)
    return EXIT_OK


def cmd_annotate(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    split = _load_split(state_dir)
    provider = build_provider(cfg)
    ann_cfg = cfg.get("annotate", {})
    labels = annotate_dataset(
        provider,
        split.train,
        retry_limit=ann_cfg.get("retry_limit", 2),
        max_in_flight=ann_cfg.get("max_in_flight", 4),
        loop_index=1,
    )
    store = StateStore(state_dir)
    store.write_json("loop_0001/annotations.json", labels.to_dict())
    store.write_json(
        "loop_0001/annotation_failures.json",
        {"failed_ids": list(labels.failed_ids), "n_failed": len(labels.failed_ids)},
    )
    print("annotated %d rows (%d failures) with %s"
          % (len(labels), len(labels.failed_ids), provider.identity))
    return EXIT_OK


def cmd_teach(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    split = _load_split(state_dir)
    store = StateStore(state_dir)
    labels = SoftLabelSet.from_dict(store.read_json("loop_0001/annotations.json"))
    config = build_train_config(cfg, args)
    std = standardize(split)
    pair, report = teach(std.train, labels, config)
    store.write_model("loop_0001/model_a.npz", pair.a)
    store.write_model("loop_0001/model_b.npz", pair.b)
    store.write_json("loop_0001/teach_report.json", report.to_dict())
    print("taught pair: T=%.1f, stop epoch %d, early-stop loss %.4f"
          % (report.chosen_T, report.stop_epoch, report.best_des_loss))
    return EXIT_OK


def cmd_loop(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    split = _load_split(state_dir)
    provider = build_provider(cfg)
    config = build_train_config(cfg, args)
    policy = build_policy(cfg, state_dir)
    allow_gold = bool(cfg.get("allow_gold_labels", True))
    result = run_loop(
        split,
        provider,
        policy,
        config,
        allow_gold_labels=allow_gold,
        retry_limit=cfg.get("annotate", {}).get("retry_limit", 2),
        state_dir=state_dir,
        resume=args.resume,
    )
    out = _output_dir(cfg, state_dir)
    for record in result.state.records:
        print("loop %d: des_acc=%.4f T=%.1f %s (%s)" % (
            record.t, record.des_accuracy, record.chosen_T,
            record.decision, record.rationale))
    if allow_gold and split.test.has_gold_labels:
        report = build_eval_report(
            result.predictions[:, 1], split.test.gold_labels,
            seed=config.seed, provenance="loop_%d" % result.state.t,
        )
        with open(os.path.join(out, "eval_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print("final test AUC %.4f over %d loops" % (report.auc, result.state.t))
    else:
        print("completed %d loops (gold-label metrics disabled)" % result.state.t)
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    split = _load_split(state_dir)
    if not split.test.has_gold_labels:
        raise ConfigError("eval needs gold labels in the persisted split")
    pair, t = load_final_pair(state_dir, split.train.schema.fingerprint())
    std = standardize(split)
    scores = pair.predict(std.test)[:, 1]
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    report = build_eval_report(scores, split.test.gold_labels, seed=seed,
                               provenance="loop_%d" % t)
    out = _output_dir(cfg, state_dir)
    with open(os.path.join(out, "eval_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    print("test AUC %.4f (baseline %.4f, %d pos / %d neg)"
          % (report.auc, report.baseline_auc, report.n_pos, report.n_neg))
    return EXIT_OK


def cmd_shapley(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    split = _load_split(state_dir)
    pair, t = load_final_pair(state_dir, split.train.schema.fingerprint())
    std = standardize(split)
    shap_cfg = cfg.get("shapley", {})
    row = int(shap_cfg.get("row", 0))
    mc_samples = int(shap_cfg.get("mc_samples", 2000))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    background = reorder_columns(std.train)
    x = reorder_columns(std.test)[row]
    schema = split.train.schema
    names = [schema.columns[i].name for i in schema.numerical_indices]
    names += [schema.columns[i].name for i in schema.categorical_indices]
    estimate = mc_shapley(
        lambda X: pair.predict_dense(X)[:, 1], background, x,
        mc_samples=mc_samples, seed=seed, feature_names=names,
    )
    out = _output_dir(cfg, state_dir)
    with open(os.path.join(out, "shapley.json"), "w", encoding="utf-8") as fh:
        json.dump({"loop": t, "row": row, **estimate.to_dict()}, fh, indent=2)
    emit_shapley(estimate, os.path.join(out, "shapley.csv"), loop=t)
    top = names[int(np.argmax(np.abs(estimate.values)))]
    print("shapley over %d samples: strongest feature %s" % (mc_samples, top))
    return EXIT_OK


def cmd_plot(cfg, args) -> int:
    state_dir = _state_dir(cfg, args)
    out = _output_dir(cfg, state_dir)
    emitted = []
    records = restore_records(state_dir)
    if records:
        emit_loop_curves([r.to_dict() for r in records],
                         os.path.join(out, "loop_curves.csv"))
        emitted.append("loop_curves.csv")
    store = StateStore(state_dir)
    if store.exists("loop_0001/annotations.json"):
        split = _load_split(state_dir)
        if split.train.has_gold_labels:
            labels = SoftLabelSet.from_dict(store.read_json("loop_0001/annotations.json"))
            bins = confidence_bin_report(labels, split.train.gold_labels)
            emit_confidence_bins(bins, os.path.join(out, "confidence_bins.csv"))
            emitted.append("confidence_bins.csv")
    if not emitted:
        raise ConfigError("nothing to plot under %s; run loop or annotate first" % state_dir)
    print("wrote %s to %s" % (", ".join(emitted), out))
    return EXIT_OK


# ---------------------------------------------------------------------------


LOCKED_COMMANDS = ("ingest", "annotate", "teach", "loop")

COMMANDS = {
    "ingest": cmd_ingest,
    "annotate": cmd_annotate,
    "teach": cmd_teach,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "shapley": cmd_shapley,
    "plot": cmd_plot,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synertab",
        description="Annotator/small-model synergy loop for tabular prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--state-dir", default=None, help="override the config state_dir")
        p.add_argument("--resume", action="store_true",
                       help="continue an interrupted run from its state directory")
        p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[],
                       help="disable one mechanism (repeatable)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    lock = None
    try:
        cfg = load_config(args.config)
        if args.command in LOCKED_COMMANDS:
            lock = acquire_lock(_state_dir(cfg, args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print("provider error: %s" % exc, file=sys.stderr)
        return EXIT_PROVIDER
    except TrainingError as exc:
        print("training error: %s" % exc, file=sys.stderr)
        return EXIT_TRAINING
    except StateError as exc:
        print("state error: %s" % exc, file=sys.stderr)
        return EXIT_STATE
    finally:
        release_lock(lock)


if __name__ == "__main__":
    sys.exit(main())
