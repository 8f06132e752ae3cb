"""Training loop, evaluation wiring, checkpoint lifecycle, ablation runner.

One optimizer update covers batch_size * accum_steps documents: every
micro-batch backpropagates the raw per-pair loss sum, gradients are scaled
once by the update's total pair count, clipped, and stepped. That makes
(batch B, accum 1) and (batch 1, accum B) produce identical updates.

Checkpoints are written at epoch boundaries and contain everything the
next step depends on (parameters, Adam moments, step counter, config text,
data-shuffle RNG state), so a resumed run is bit-identical to an
uninterrupted one. The vocabulary rides along as a sibling file.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_to_text, parse_config_text
from .data import (
    Document,
    EvalReport,
    SyntheticWorldConfig,
    composed_recall,
    evaluate,
    generate_synthetic,
    load_docred,
    load_relation_map,
    train_fact_set,
)
from .encoder import Vocabulary
from .errors import ConfigError, DataError
from .model import DocuNetModel
from .optim import AdamW, clip_gradients, lr_schedule

CSV_HEADER = ["epoch", "step", "split", "loss", "precision", "recall", "f1",
              "ign_f1"]


def build_corpus(cfg: TrainConfig):
    """Train/dev documents plus the relation-name map, per config."""
    if cfg.train_path:
        if not cfg.rel_info_path:
            raise ConfigError("train_path set but rel_info_path missing")
        rel_map = load_relation_map(cfg.rel_info_path)
        train_docs = load_docred(cfg.train_path, rel_map)
        dev_docs = load_docred(cfg.dev_path, rel_map) if cfg.dev_path else []
        return train_docs, dev_docs, rel_map
    world = SyntheticWorldConfig(
        num_docs=cfg.synth_train_docs + cfg.synth_dev_docs,
        num_cities=cfg.synth_cities, num_regions=cfg.synth_regions,
        num_countries=cfg.synth_countries, noise_rate=cfg.synth_noise_rate,
        seed=cfg.seed, transitive_closure=cfg.synth_closure,
        shuffle_sentences=cfg.synth_shuffle,
    )
    docs = generate_synthetic(world)
    rel_map = {name: i for i, name in enumerate(world.relations)}
    return docs[:cfg.synth_train_docs], docs[cfg.synth_train_docs:], rel_map


@dataclass
class TrainResult:
    best_f1: float
    best_epoch: int
    best_report: EvalReport | None
    checkpoint_path: str | None
    history: list[dict]
    final_loss: float
    initial_loss: float
    model: DocuNetModel


def _data_rng(seed: int) -> np.random.Generator:
    # separate stream from parameter init so both stay reproducible
    return np.random.default_rng(seed + 1_000_003)


def evaluate_model(model: DocuNetModel, docs, train_facts=None) -> EvalReport:
    return evaluate(model.predict(docs), docs, train_facts=train_facts)


def train(cfg: TrainConfig, train_docs: list[Document],
          dev_docs: list[Document], run_dir: str | None = None) -> TrainResult:
    """Run the optimization loop; returns the best-on-dev state.

    Aborts (after writing a last-state checkpoint when possible) if the
    loss or any gradient stops being finite.
    """
    cfg.validate()
    if not train_docs:
        raise DataError("empty training split")
    dev_docs = dev_docs or train_docs

    vocab = Vocabulary.from_documents(train_docs)
    model = DocuNetModel(vocab, cfg, np.random.default_rng(cfg.seed))
    optimizer = AdamW(
        model.registry, default_lr=cfg.unet_lr,
        lr_groups={"encoder.": cfg.encoder_lr},
        weight_decay=cfg.weight_decay,
    )
    rng = _data_rng(cfg.seed)
    train_facts = train_fact_set(train_docs)

    docs_per_update = cfg.batch_size * cfg.accum_steps
    updates_per_epoch = max(1, math.ceil(len(train_docs) / docs_per_update))
    total_updates = cfg.epochs * updates_per_epoch

    history: list[dict] = []
    best_f1, best_epoch, best_report = -1.0, -1, None
    epochs_since_best = 0
    initial_loss = final_loss = float("nan")
    ckpt_path = None
    writer = _CsvLog(os.path.join(run_dir, "metrics.csv")) if run_dir else None

    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_docs))
            epoch_loss_sum, epoch_pairs = 0.0, 0
            for u in range(updates_per_epoch):
                chunk = order[u * docs_per_update:(u + 1) * docs_per_update]
                if len(chunk) == 0:
                    continue
                model.registry.zero_grad()
                update_sum, update_pairs = 0.0, 0
                for micro_at in range(0, len(chunk), cfg.batch_size):
                    micro = chunk[micro_at:micro_at + cfg.batch_size]
                    total = None
                    for di in micro:
                        part, count = model.doc_loss_sum(train_docs[int(di)])
                        total = part if total is None else total + part
                        update_pairs += count
                    total.backward()
                    update_sum += total.item()
                if not np.isfinite(update_sum):
                    raise _Divergence(
                        f"non-finite loss at epoch {epoch} update {u}"
                    )
                _scale_grads(model, 1.0 / update_pairs)
                clip_gradients(model.registry, cfg.clip_norm)
                step += 1
                optimizer.step(lr_multiplier=lr_schedule(step, total_updates,
                                                         cfg.warmup))
                epoch_loss_sum += update_sum
                epoch_pairs += update_pairs

            mean_loss = epoch_loss_sum / max(epoch_pairs, 1)
            if math.isnan(initial_loss):
                initial_loss = mean_loss
            final_loss = mean_loss
            if writer:
                writer.row(epoch, step, "train", loss=mean_loss)

            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                report = evaluate_model(model, dev_docs, train_facts)
                if writer:
                    writer.row(epoch, step, "dev", report=report)
                history.append({"epoch": epoch, "step": step,
                                "loss": mean_loss, "dev_f1": report.f1,
                                "dev_ign_f1": report.ign_f1})
                if report.f1 > best_f1:
                    best_f1, best_epoch, best_report = report.f1, epoch, report
                    epochs_since_best = 0
                    if run_dir:
                        ckpt_path = os.path.join(run_dir, "best.dunc")
                        _save_state(ckpt_path, cfg, model, optimizer, rng, step)
                else:
                    epochs_since_best += 1
                    if cfg.patience and epochs_since_best >= cfg.patience:
                        break
    except _Divergence as e:
        if run_dir:
            _save_state(os.path.join(run_dir, "last.dunc"), cfg, model,
                        optimizer, rng, step)
        raise DataError(str(e)) from e
    finally:
        if writer:
            writer.close()

    if run_dir:
        _save_state(os.path.join(run_dir, "last.dunc"), cfg, model, optimizer,
                    rng, step)
    return TrainResult(best_f1=best_f1, best_epoch=best_epoch,
                       best_report=best_report, checkpoint_path=ckpt_path,
                       history=history, final_loss=final_loss,
                       initial_loss=initial_loss, model=model)


class _Divergence(Exception):
    pass


def _scale_grads(model: DocuNetModel, scale: float) -> None:
    for _, t in model.registry.items():
        if t.grad is not None:
            t.grad = t.grad * scale


class _CsvLog:
    def __init__(self, path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_HEADER)

    def row(self, epoch, step, split, loss=None, report: EvalReport | None = None):
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        metrics = [None] * 4 if report is None else [
            report.precision, report.recall, report.f1, report.ign_f1]
        self._writer.writerow([epoch, step, split, fmt(loss)] +
                              [fmt(v) for v in metrics])
        self._fh.flush()

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# checkpoint lifecycle
# ---------------------------------------------------------------------------


def _save_state(path, cfg, model, optimizer, rng, step) -> None:
    tensors = {name: t.data for name, t in model.registry.items()}
    tensors.update(optimizer.state_arrays())
    bias_flags = {name for name, _ in model.registry.items()
                  if model.registry.is_bias(name)}
    save_checkpoint(path, step, config_to_text(cfg),
                    rng.bit_generator.state, tensors, bias_flags)
    model.vocab.save(path + ".vocab")


def model_from_checkpoint(path, vocab: Vocabulary | None = None):
    """Rebuild (model, optimizer, cfg, data_rng, step) from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = parse_config_text(ckpt.config_text)
    if vocab is None:
        vocab_path = path + ".vocab"
        if not os.path.exists(vocab_path):
            raise DataError(f"no vocabulary alongside checkpoint: {vocab_path}")
        vocab = Vocabulary.load(vocab_path)
    model = DocuNetModel(vocab, cfg, np.random.default_rng(cfg.seed))
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    model.registry.load_values(params)
    optimizer = AdamW(model.registry, default_lr=cfg.unet_lr,
                      lr_groups={"encoder.": cfg.encoder_lr},
                      weight_decay=cfg.weight_decay)
    optimizer.load_state_arrays(ckpt.tensors, ckpt.step)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return model, optimizer, cfg, rng, ckpt.step


# ---------------------------------------------------------------------------
# ablation study
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_unet", "bce", "similarity")


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant == "full":
        return replace(cfg)
    if variant == "no_unet":
        return replace(cfg, use_unet=False)
    if variant == "bce":
        return replace(cfg, loss="bce")
    if variant == "similarity":
        return replace(cfg, strategy="similarity")
    raise ConfigError(f"unknown ablation variant {variant!r}")


def ablate(cfg: TrainConfig, seeds: list[int],
           variants: tuple[str, ...] = ABLATION_VARIANTS,
           run_dir: str | None = None) -> dict:
    """Train every variant on the same corpus across seeds; tabulate dev F1,
    2-hop recall, and per-entity-count bucket F1."""
    train_docs, dev_docs, _ = build_corpus(cfg)
    train_facts = train_fact_set(train_docs)
    results: dict[str, dict] = {}
    runs = []
    for variant in variants:
        scores, composed, buckets = [], [], []
        for seed in seeds:
            vcfg = replace(variant_config(cfg, variant), seed=seed)
            out = train(vcfg, train_docs, dev_docs)
            preds = out.model.predict(dev_docs)
            report = evaluate(preds, dev_docs, train_facts=train_facts)
            scores.append(report.f1)
            composed.append(composed_recall(preds, dev_docs))
            buckets.append(report.bucket_f1)
            runs.append({"variant": variant, "seed": seed, "f1": report.f1})
        results[variant] = {
            "f1_mean": statistics.fmean(scores),
            "f1_sd": statistics.stdev(scores) if len(scores) > 1 else 0.0,
            "f1_per_seed": scores,
            "composed_recall_mean": statistics.fmean(composed),
            "composed_recall_per_seed": composed,
            "bucket_f1": _merge_buckets(buckets),
        }
    table = {"variants": results, "runs": runs, "seeds": seeds}
    if run_dir:
        with open(os.path.join(run_dir, "ablation.json"), "w") as fh:
            json.dump(table, fh, indent=2)
    return table


def _merge_buckets(bucket_rows: list[dict[str, float]]) -> dict[str, float]:
    merged: dict[str, list[float]] = {}
    for row in bucket_rows:
        for label, value in row.items():
            merged.setdefault(label, []).append(value)
    return {label: statistics.fmean(vals) for label, vals in sorted(merged.items())}


def format_ablation_table(table: dict) -> str:
    lines = [f"{'variant':<12} {'dev F1':>16} {'2-hop recall':>14}"]
    for variant, row in table["variants"].items():
        lines.append(
            f"{variant:<12} {row['f1_mean']:.4f} +/- {row['f1_sd']:.4f}"
            f" {row['composed_recall_mean']:>13.4f}"
        )
        for label, value in row["bucket_f1"].items():
            lines.append(f"    entities {label:<6} F1 {value:.4f}")
    return "\n".join(lines)
