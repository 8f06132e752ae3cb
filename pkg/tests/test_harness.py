"""Training-loop behaviour: config files, checkpoints, determinism, CLI."""

import csv
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from docunet import cli
from docunet.checkpoint import load_checkpoint, save_checkpoint
from docunet.config import TrainConfig, config_to_text, load_config, parse_config_text
from docunet.data import SyntheticWorldConfig, evaluate, generate_synthetic
from docunet.encoder import Vocabulary
from docunet.errors import ConfigError, DataError
from docunet.model import DocuNetModel
from docunet.train import (
    build_corpus,
    model_from_checkpoint,
    train,
    variant_config,
)

QUICK = dict(epochs=2, synth_train_docs=8, synth_dev_docs=4, eval_every=1,
             patience=0, matrix_size=12, embed_dim=32, ffn_dim=48,
             num_heads=2)


def quick_cfg(**overrides):
    kwargs = dict(QUICK)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


class TestConfigFile:
    def test_round_trip_through_text(self):
        cfg = quick_cfg(encoder_lr=1.25e-4, channel_schedule=(3, 8, 16, 8, 4, 8))
        again = parse_config_text(config_to_text(cfg))
        assert again == cfg

    def test_comments_and_blanks(self):
        text = "\n# a comment\nepochs = 7   # trailing\n\nseed=3\n"
        cfg = parse_config_text(text)
        assert cfg.epochs == 7
        assert cfg.seed == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("not_a_field = 1\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("epochs = many\n")

    def test_schedule_parses_from_csv_value(self):
        cfg = parse_config_text("channel_schedule = 3,8,16,8,4,8\n")
        assert cfg.channel_schedule == (3, 8, 16, 8, 4, 8)

    def test_schedule_head_must_match_reduced_dim(self):
        with pytest.raises(ConfigError, match="reduced_dim"):
            parse_config_text("channel_schedule = 5,8,16,8,4,8\n")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 4\nstrategy = similarity\n")
        cfg = load_config(path)
        assert cfg.epochs == 4
        assert cfg.strategy == "similarity"


class TestCheckpointFormat:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.normal(size=(3, 2)), "a.b": rng.normal(size=3),
                   "opt.m.a.w": np.zeros((3, 2))}
        state = np.random.default_rng(5).bit_generator.state
        p1, p2 = tmp_path / "c1.dunc", tmp_path / "c2.dunc"
        save_checkpoint(p1, 17, "epochs = 3\n", state, tensors, {"a.b"})
        ck = load_checkpoint(p1)
        save_checkpoint(p2, ck.step, ck.config_text, ck.rng_state, ck.tensors,
                        ck.bias_flags)
        assert p1.read_bytes() == p2.read_bytes()

    def test_fields_survive(self, tmp_path):
        path = tmp_path / "c.dunc"
        arr = np.arange(6, dtype=float).reshape(2, 3)
        save_checkpoint(path, 5, "seed = 9\n",
                        np.random.default_rng(1).bit_generator.state,
                        {"w": arr}, set())
        ck = load_checkpoint(path)
        assert ck.step == 5
        assert ck.config_text == "seed = 9\n"
        np.testing.assert_array_equal(ck.tensors["w"], arr)

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.dunc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)


class TestTrainingLoop:
    def test_zero_lr_leaves_params_untouched(self):
        cfg = quick_cfg(encoder_lr=0.0, unet_lr=0.0, weight_decay=0.0)
        train_docs, dev_docs, _ = build_corpus(cfg)
        probe_model = DocuNetModel(Vocabulary.from_documents(train_docs), cfg,
                                   np.random.default_rng(cfg.seed))
        before = {n: t.data.copy() for n, t in probe_model.registry.items()}
        result = train(cfg, train_docs, dev_docs)
        for name, t in result.model.registry.items():
            assert (t.data == before[name]).all(), name

    def test_same_seed_identical_metrics(self, tmp_path):
        cfg = quick_cfg(epochs=3)
        train_docs, dev_docs, _ = build_corpus(cfg)
        logs = []
        for sub in ("a", "b"):
            run_dir = tmp_path / sub
            run_dir.mkdir()
            train(cfg, train_docs, dev_docs, run_dir=str(run_dir))
            logs.append((run_dir / "metrics.csv").read_text())
        assert logs[0] == logs[1]

    def test_csv_layout(self, tmp_path):
        cfg = quick_cfg()
        train_docs, dev_docs, _ = build_corpus(cfg)
        train(cfg, train_docs, dev_docs, run_dir=str(tmp_path))
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "step", "split", "loss", "precision",
                           "recall", "f1", "ign_f1"]
        splits = {row[2] for row in rows[1:]}
        assert splits == {"train", "dev"}

    def test_accumulation_equivalence(self):
        base = quick_cfg(epochs=1, synth_train_docs=8, batch_size=4,
                         accum_steps=1, eval_every=0)
        accum = replace(base, batch_size=1, accum_steps=4)
        train_docs, dev_docs, _ = build_corpus(base)
        out_a = train(base, train_docs, dev_docs)
        out_b = train(accum, train_docs, dev_docs)
        for name, t in out_a.model.registry.items():
            other = out_b.model.registry[name].data
            denom = np.maximum(np.abs(t.data), 1e-12)
            rel = np.max(np.abs(t.data - other) / denom)
            assert rel <= 1e-10, (name, rel)

    def test_checkpoint_resume_bit_identical_loss(self, tmp_path):
        cfg = quick_cfg(epochs=2, eval_every=1)
        train_docs, dev_docs, _ = build_corpus(cfg)
        result = train(cfg, train_docs, dev_docs, run_dir=str(tmp_path))
        probe_docs = train_docs[:4]

        resumed, _, _, _, _ = model_from_checkpoint(
            os.path.join(str(tmp_path), "last.dunc"))
        a = result.model.batch_mean_loss(probe_docs).item()
        b = resumed.batch_mean_loss(probe_docs).item()
        assert a == b

        # one full update on each must also coincide bitwise
        def one_step(model):
            from docunet.optim import AdamW, clip_gradients
            opt = AdamW(model.registry, default_lr=cfg.unet_lr,
                        lr_groups={"encoder.": cfg.encoder_lr},
                        weight_decay=cfg.weight_decay)
            model.registry.zero_grad()
            total, count = None, 0
            for doc in probe_docs:
                part, c = model.doc_loss_sum(doc)
                total = part if total is None else total + part
                count += c
            total.backward()
            for _, t in model.registry.items():
                if t.grad is not None:
                    t.grad = t.grad * (1.0 / count)
            clip_gradients(model.registry, cfg.clip_norm)
            opt.step()
            return model.batch_mean_loss(probe_docs).item()

        assert one_step(result.model) == one_step(resumed)

    def test_divergence_aborts_and_keeps_checkpoint(self, tmp_path):
        # one step at this rate flings weights to ~1e150; the next forward
        # overflows and the loop must abort, preserving the last state
        cfg = quick_cfg(epochs=2, encoder_lr=1e150, unet_lr=1e150)
        train_docs, dev_docs, _ = build_corpus(cfg)
        with pytest.raises(DataError):
            train(cfg, train_docs, dev_docs, run_dir=str(tmp_path))
        assert (tmp_path / "last.dunc").exists()

    def test_variant_configs(self):
        cfg = quick_cfg()
        assert variant_config(cfg, "no_unet").use_unet is False
        assert variant_config(cfg, "bce").loss == "bce"
        assert variant_config(cfg, "similarity").strategy == "similarity"
        with pytest.raises(ConfigError):
            variant_config(cfg, "nonsense")

    def test_similarity_variant_trains(self):
        cfg = quick_cfg(strategy="similarity", epochs=1)
        train_docs, dev_docs, _ = build_corpus(cfg)
        result = train(cfg, train_docs, dev_docs)
        assert np.isfinite(result.final_loss)

    def test_batched_scores_match_single_pair_head(self):
        cfg = quick_cfg()
        train_docs, _, _ = build_corpus(cfg)
        doc = train_docs[0]
        model = DocuNetModel(Vocabulary.from_documents(train_docs), cfg,
                             np.random.default_rng(0))
        from docunet import tensor as T
        from docunet.encoder import entity_pool
        from docunet.relmatrix import build_matrix, reduce_channels

        fwd = model.forward_doc(doc)
        enc = model.encoder.encode_document(doc)
        embs = [entity_pool(enc, e) for e in fwd.order]
        matrix = build_matrix(enc, fwd.order, cfg.strategy, cfg.matrix_size,
                              w1=model.w1, w2=model.w2, b2=model.b2,
                              embeddings=embs)
        cells = model.seg.forward(
            T.transpose(reduce_channels(matrix, model.w3, model.b3), 2, 0, 1))
        for row, (s, o) in zip(fwd.scores.data, fwd.pair_index):
            cell = T.reshape(cells[:, s, o], model.seg.out_channels)
            single = model.head.pair_logits(embs[s], embs[o], cell)
            np.testing.assert_allclose(row, single.data, rtol=1e-10,
                                       atol=1e-12)


class TestCli:
    def test_train_eval_cycle(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            "epochs = 2\nsynth_train_docs = 8\nsynth_dev_docs = 4\n"
            "embed_dim = 32\nffn_dim = 48\nnum_heads = 2\npatience = 0\n"
        )
        run_dir = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path),
                         "--out", str(run_dir)]) == 0
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "best.dunc").exists()
        assert (run_dir / "best.dunc.vocab").exists()

        data_path = tmp_path / "dev.json"
        assert cli.main(["gen-synthetic", "--out", str(data_path),
                         "--seed", "3", "--docs", "4"]) == 0
        preds_path = tmp_path / "preds.json"
        assert cli.main(["eval", "--checkpoint", str(run_dir / "best.dunc"),
                         "--data", str(data_path),
                         "--out", str(preds_path)]) == 0
        records = json.loads(preds_path.read_text())
        assert all(set(r) == {"title", "h_idx", "t_idx", "r"}
                   for r in records)

    def test_gen_synthetic_deterministic(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli.main(["gen-synthetic", "--out", str(a), "--seed", "5",
                         "--docs", "3"]) == 0
        assert cli.main(["gen-synthetic", "--out", str(b), "--seed", "5",
                         "--docs", "3"]) == 0
        assert a.read_text() == b.read_text()

    def test_gradcheck_command(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "composed_model" in out
        assert "FAIL" not in out

    def test_ablate_command_quick(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(
            "epochs = 1\nsynth_train_docs = 6\nsynth_dev_docs = 3\n"
            "embed_dim = 32\nffn_dim = 48\nnum_heads = 2\npatience = 0\n"
        )
        out_dir = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(cfg_path),
                         "--seeds", "0,1", "--variants", "full,no_unet",
                         "--out", str(out_dir)]) == 0
        table = json.loads((out_dir / "ablation.json").read_text())
        assert set(table["variants"]) == {"full", "no_unet"}
        assert len(table["runs"]) == 4  # 2 variants x 2 seeds

    def test_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("mystery = 1\n")
        assert cli.main(["train", "--config", str(bad)]) == 2
