"""Harness tests: scheduler contract, smoke training, determinism,
refine-as-continuation, frequency consistency, audits, and evaluation."""

import math

import numpy as np
import pytest

from faceforge.autodiff import Adam
from faceforge.corpus import (EOS, DEFAULT_TEMPLATES, Vocabulary, encode_pair,
                              make_batch, synth_corpus)
from faceforge.errors import TrainingDivergedError, UsageError
from faceforge.frequency import FrequencyTable
from faceforge.model import Seq2Seq, load_checkpoint
from faceforge.training import (PlateauScheduler, TrainConfig, analyze,
                                evaluate, refine, train)


def tiny_corpus(n=120, seed=0, templates=10):
    pairs = synth_corpus(DEFAULT_TEMPLATES[:templates], exponent=1.2, size=n,
                         seed=seed, fidelity=0.2)
    vocab = Vocabulary.build([f"{m} {r}" for m, r in pairs], 300)
    encoded = [encode_pair(vocab, m, r) for m, r in pairs]
    return vocab, encoded


def tiny_config(**overrides) -> TrainConfig:
    base = dict(loss="ce", batch_size=16, lr=0.005, dropout=0.0, max_epochs=2,
                seed=3, hidden_size=12, embed_size=8, vocab_size=300,
                max_decode_len=10, valid_cap=30, patience=3)
    base.update(overrides)
    return TrainConfig(**base)


class TestPlateauScheduler:
    def _sched(self, patience=3):
        opt = Adam({"w": np.zeros((1, 1))}, lr=1.0)
        return PlateauScheduler(opt, factor=0.5, patience=patience,
                                threshold=1e-4), opt

    def test_four_bad_evals_halve_exactly_once(self):
        sched, opt = self._sched(patience=3)
        assert sched.observe(0.5)  # initial improvement
        for _ in range(4):
            assert not sched.observe(0.5)  # within threshold: no improvement
        assert opt.lr == 0.5
        assert sched.num_reductions == 1

    def test_improvement_resets_counters(self):
        sched, opt = self._sched()
        sched.observe(0.1)
        sched.observe(0.1)
        sched.observe(0.1)
        assert sched.num_bad == 2
        assert sched.observe(0.2)
        assert sched.num_bad == 0
        assert sched.reductions_since_improve == 0
        assert opt.lr == 1.0

    def test_threshold_gates_improvement(self):
        sched, _ = self._sched()
        sched.observe(0.5)
        assert not sched.observe(0.5 + 5e-5)  # below the 1e-4 threshold

    def test_lr_monotone_nonincreasing(self):
        sched, opt = self._sched(patience=1)
        rng = np.random.default_rng(0)
        last = opt.lr
        for _ in range(20):
            sched.observe(float(rng.uniform(0, 0.2)))
            assert opt.lr <= last + 1e-15
            last = opt.lr

    def test_reduction_bound(self):
        sched, opt = self._sched(patience=2)
        sched.observe(1.0)
        evals = 10
        for _ in range(evals):
            sched.observe(0.0)
        assert sched.num_reductions <= math.ceil(evals / 2)


class TestTrain:
    def test_loss_decreases_on_toy_corpus(self, tmp_path):
        vocab, pairs = tiny_corpus(80)
        config = tiny_config(max_epochs=4, eval_every=2)
        outcome = train(config, pairs, pairs[:20], out_dir=tmp_path, vocab=vocab)
        first = float(outcome.log[0].split()[3])
        last = float(outcome.log[-1].split()[3])
        assert last < first
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "config.resolved").exists()
        assert (tmp_path / "run.log").exists()

    def test_log_line_format(self, tmp_path):
        vocab, pairs = tiny_corpus(40)
        outcome = train(tiny_config(max_epochs=1), pairs, pairs[:10],
                        out_dir=tmp_path, vocab=vocab)
        for line in outcome.log:
            epoch, step, lr, loss, d1, d2 = line.split()
            int(epoch), int(step)
            float(lr), float(loss), float(d1), float(d2)

    def test_deterministic_checkpoints(self, tmp_path):
        vocab, pairs = tiny_corpus(60)
        a, b = tmp_path / "a", tmp_path / "b"
        train(tiny_config(), pairs, pairs[:15], out_dir=a, vocab=vocab)
        train(tiny_config(), pairs, pairs[:15], out_dir=b, vocab=vocab)
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "run.log").read_text() == (b / "run.log").read_text()

    def test_rejects_non_ce_from_scratch(self):
        vocab, pairs = tiny_corpus(20)
        with pytest.raises(UsageError):
            train(tiny_config(loss="face-opr"), pairs, pairs[:5], vocab=vocab)

    def test_scratch_variant_behind_flag(self):
        vocab, pairs = tiny_corpus(30)
        config = tiny_config(loss="face-gpr", allow_scratch_variants=True,
                             max_epochs=1)
        outcome = train(config, pairs, pairs[:5], vocab=vocab)
        assert outcome.epochs_run == 1

    def test_divergence_raises(self):
        vocab, pairs = tiny_corpus(20)
        model = Seq2Seq(vocab.size, 12, 8, seed=0)
        model.params["emb"][0, 0] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train(tiny_config(), pairs, pairs[:5], model=model)
        assert err.value.checkpoint is None


class TestRefine:
    def _base(self, tmp_path, vocab, pairs):
        config = tiny_config(max_epochs=2)
        return train(config, pairs, pairs[:20], out_dir=tmp_path / "base",
                     vocab=vocab)

    def test_refine_ce_equals_train_continuation(self, tmp_path):
        vocab, pairs = tiny_corpus(60)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(batch_size=10, max_epochs=1, seed=11)

        cont_model = Seq2Seq.from_params(base.model.copy_params())
        a = train(config, pairs, pairs[:15], model=cont_model,
                  out_dir=tmp_path / "cont", vocab=vocab)
        b = refine(config, base.checkpoint, pairs, pairs[:15],
                   out_dir=tmp_path / "ref", vocab=vocab)
        assert (tmp_path / "cont" / "model.ckpt").read_bytes() == \
            (tmp_path / "ref" / "model.ckpt").read_bytes()
        assert a.log == b.log

    def test_refine_updates_gt_table_consistently(self, tmp_path):
        vocab, pairs = tiny_corpus(50)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(loss="face-gpr", batch_size=8, max_epochs=2,
                             eval_every=100)  # no mid-epoch stop
        outcome = refine(config, base.checkpoint, pairs, pairs[:10],
                         vocab=vocab)
        # from-scratch recount over everything the loop saw: each epoch
        # visits every pair exactly once
        scratch = FrequencyTable(vocab.size, "gt")
        batch = make_batch(pairs)
        for _ in range(outcome.epochs_run):
            scratch.update_gt(batch)
        np.testing.assert_array_equal(outcome.gt_table.counts, scratch.counts)

    def test_refine_output_mode_populates_table(self, tmp_path):
        vocab, pairs = tiny_corpus(40)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(loss="face-opr", batch_size=8, max_epochs=1)
        outcome = refine(config, base.checkpoint, pairs, pairs[:10], vocab=vocab)
        assert outcome.out_table.total > 0
        assert outcome.gt_table.total == 0

    def test_audit_most_frequent_output_token_gets_min_weight(self, tmp_path):
        vocab, pairs = tiny_corpus(80)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(loss="face-opr", batch_size=8, max_epochs=1)
        outcome = refine(config, base.checkpoint, pairs, pairs[:10], vocab=vocab)
        top_token = int(np.argmax(outcome.out_table.counts))
        audit = outcome.audit
        if top_token in audit:
            top_min = audit[top_token][2]
            assert all(top_min <= rec[2] + 1e-12 for rec in audit.values())

    def test_resume_optimizer_flag(self, tmp_path):
        vocab, pairs = tiny_corpus(30)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(max_epochs=1, resume_optimizer=True)
        outcome = refine(config, base.checkpoint, pairs, pairs[:5], vocab=vocab)
        assert outcome.epochs_run == 1
        # a checkpoint without moments cannot be resumed
        from faceforge.model import save_checkpoint
        bare = tmp_path / "bare.ckpt"
        save_checkpoint(bare, base.model)
        with pytest.raises(UsageError):
            refine(config, bare, pairs, pairs[:5], vocab=vocab)

    def test_refine_writes_frequency_dump(self, tmp_path):
        vocab, pairs = tiny_corpus(30)
        base = self._base(tmp_path, vocab, pairs)
        config = tiny_config(loss="face-opr", batch_size=8, max_epochs=1)
        refine(config, base.checkpoint, pairs, pairs[:5],
               out_dir=tmp_path / "ref", vocab=vocab)
        dump = (tmp_path / "ref" / "frequency.tsv").read_text()
        assert "\t" in dump


class TestEvaluate:
    def test_echo_overfit_gives_bleu_one(self, tmp_path):
        vocab, _ = tiny_corpus(10)
        pair = encode_pair(vocab, "how are you doing today", "i do n't know .")
        model = Seq2Seq(vocab.size, 16, 8, seed=4)
        opt = Adam(model.params, lr=0.01)
        from faceforge.autodiff import Tape, clip_global_norm
        from faceforge.losses import LossConfig, batch_loss
        batch = make_batch([pair])
        for _ in range(250):
            tape = Tape()
            fwd = model.forward_teacher(tape, batch)
            loss, _ = batch_loss(fwd.step_probs, batch.targets,
                                 batch.target_mask, LossConfig("ce"))
            tape.backward(loss)
            grads = {k: t.grad for k, t in fwd.params.items()}
            clip_global_norm(grads, 5.0)
            opt.step(grads)
        report, hyps = evaluate(model, [pair], vocab, tiny_config(),
                                out_dir=tmp_path)
        assert report.bleu == 1.0
        assert hyps[0] == ["i", "do", "n't", "know", "."]

    def test_report_consistent_with_responses_file(self, tmp_path):
        vocab, pairs = tiny_corpus(40)
        model = Seq2Seq(vocab.size, 12, 8, seed=5)
        report, _ = evaluate(model, pairs[:20], vocab, tiny_config(),
                             out_dir=tmp_path)
        lines = (tmp_path / "responses.txt").read_text().splitlines()
        responses = [line.split() for line in lines]
        live = [r for r in responses if r]
        if live:
            from faceforge.metrics import distinct_n
            assert report.d1 == pytest.approx(distinct_n(responses, 1))
            assert report.d2 == pytest.approx(distinct_n(responses, 2))
        report_text = (tmp_path / "report.txt").read_text()
        assert f"d1={report.d1:.6f}" in report_text
        record = (tmp_path / "report.line").read_text()
        assert record.count("\n") == 1

    def test_deterministic(self, tmp_path):
        vocab, pairs = tiny_corpus(30)
        model = Seq2Seq(vocab.size, 12, 8, seed=6)
        r1, h1 = evaluate(model, pairs[:10], vocab, tiny_config())
        r2, h2 = evaluate(model, pairs[:10], vocab, tiny_config())
        assert r1 == r2 and h1 == h2

    def test_empty_test_set_rejected(self):
        vocab, _ = tiny_corpus(10)
        model = Seq2Seq(vocab.size, 12, 8)
        with pytest.raises(UsageError):
            evaluate(model, [], vocab, tiny_config())


class TestAnalyze:
    def test_hand_built_tables(self):
        responses = [["i", "am", "here"], ["i", "do"], ["you", "are"]]
        result = analyze(responses, after=["i"])
        leading = result.tables["leading"]
        assert leading.rows[0].token == "i"
        assert leading.rows[0].count == 2
        after_i = result.tables["after(i)"]
        assert {r.token for r in after_i.rows} == {"am", "do"}

    def test_weight_dump_uniform_table(self):
        vocab = Vocabulary(["aa", "bb", "cc"])
        table = FrequencyTable(vocab.size, "gt")
        table.counts[1:] = 4
        result = analyze([["aa"]], freq_table=table, vocab=vocab, top_k=10)
        assert all(w == 1.0 for _, _, w in result.weight_rows)

    def test_top_token_weight_zero(self):
        vocab = Vocabulary(["aa", "bb", "cc"])
        table = FrequencyTable(vocab.size, "gt")
        table.counts[vocab.token_to_id["aa"]] = 10
        table.counts[vocab.token_to_id["bb"]] = 2
        table.counts[vocab.token_to_id["cc"]] = 1
        result = analyze([["aa"]], freq_table=table, vocab=vocab, top_k=3)
        assert result.weight_rows[0][0] == "aa"
        assert result.weight_rows[0][2] == 0.0

    def test_format_renders(self):
        result = analyze([["i", "am"]], after=["i"])
        text = result.format()
        assert "leading" in text and "after(i)" in text


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        config = tiny_config(loss="face-opo", beta=0.02, batch_size=30)
        path = tmp_path / "run.config"
        config.to_file(path)
        loaded = TrainConfig.from_file(path)
        assert loaded == config

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.config"
        path.write_text("no_such_field = 1\n")
        with pytest.raises(UsageError):
            TrainConfig.from_file(path)

    def test_partial_override(self, tmp_path):
        path = tmp_path / "partial.config"
        path.write_text("# comment\nlr = 0.5\npatience = 7\n")
        loaded = TrainConfig.from_file(path)
        assert loaded.lr == 0.5
        assert loaded.patience == 7
        assert loaded.batch_size == TrainConfig().batch_size

    def test_validation(self):
        with pytest.raises(UsageError):
            tiny_config(patience=0).validate()
        with pytest.raises(UsageError):
            tiny_config(scheduler_factor=1.5).validate()
        with pytest.raises(UsageError):
            tiny_config(batch_size=0).validate()
