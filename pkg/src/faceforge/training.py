"""Training orchestration: CE training, the train-and-refine protocol for
every loss variant, d-1-driven LR scheduling and early stopping, evaluation,
and the response analyzer.

One loop serves both stages. During refinement the frequency tables are
updated per batch (ground-truth counts, or greedy decodes of the batch
inputs for output mode) before weights and loss are computed, so the
weights always reflect everything observed so far.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Tape, clip_global_norm
from .corpus import EOS, SequencePair, Vocabulary, make_batches
from .errors import (DegenerateFrequencyError, IngestionError, NumericError,
                     TrainingDivergedError, UsageError)
from .frequency import FrequencyTable, pre_weight
from .losses import LossConfig, batch_loss
from .metrics import MetricsReport, RankTable, metrics_report, rank_table
from .model import Seq2Seq, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
CONFIG_SNAPSHOT_NAME = "config.resolved"
RUN_LOG_NAME = "run.log"
RESPONSES_NAME = "responses.txt"
REPORT_NAME = "report.txt"
REPORT_RECORD_NAME = "report.line"
FREQUENCY_DUMP_NAME = "frequency.tsv"


@dataclass
class TrainConfig:
    """Everything a run needs; mirrors the CLI flags and the config file."""

    loss: str = "ce"
    freq_mode: str = ""           # override; empty = loss-name default
    weight_mode: str = ""         # override; empty = loss-name default
    beta: float = 0.01
    entropy_floor: float = 1e-8
    batch_size: int = 256
    lr: float = 0.001
    clip: float = 5.0
    dropout: float = 0.1
    scheduler_factor: float = 0.5
    patience: int = 3
    plateau_threshold: float = 1e-4
    early_stop_reductions: int = 3
    max_epochs: int = 10
    eval_every: int = 0           # batches between validations; 0 = each epoch
    seed: int = 0
    hidden_size: int = 64
    embed_size: int = 32
    layers: int = 1
    vocab_size: int = 1000
    max_decode_len: int = 20
    valid_cap: int = 200
    decode_batch_size: int = 32
    min_len: int = 0
    filter_stage: str = "before"
    resume_optimizer: bool = False
    allow_scratch_variants: bool = False
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    vocab_path: str = ""
    checkpoint_path: str = ""

    def validate(self) -> None:
        if self.patience < 1:
            raise UsageError("patience must be >= 1")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise UsageError("scheduler factor must be in (0, 1)")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.max_decode_len < 1:
            raise UsageError("max_decode_len must be >= 1")
        self.loss_config().validate()

    def loss_config(self) -> LossConfig:
        return LossConfig.from_name(
            self.loss, beta=self.beta, entropy_floor=self.entropy_floor,
            freq_mode=self.freq_mode or None, weight_mode=self.weight_mode or None,
        )

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for fld in dataclasses.fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)}\n")

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        known = {fld.name for fld in dataclasses.fields(cls)}
        defaults = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected `key = value`")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in known:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
                setattr(cfg, key, _parse_value(value, getattr(defaults, key)))
        return cfg


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


class PlateauScheduler:
    """Halve the learning rate after `patience` evaluations without the
    monitored metric exceeding its best by at least `threshold`."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 3,
                 threshold: float = 1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = -math.inf
        self.num_bad = 0
        self.num_reductions = 0
        self.reductions_since_improve = 0

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def observe(self, metric: float) -> bool:
        """Returns True when the metric improved past the threshold."""
        if metric > self.best + self.threshold:
            self.best = metric
            self.num_bad = 0
            self.reductions_since_improve = 0
            return True
        self.num_bad += 1
        if self.num_bad >= self.patience:
            self.optimizer.lr *= self.factor
            self.num_reductions += 1
            self.reductions_since_improve += 1
            self.num_bad = 0
        return False


@dataclass
class TrainState:
    """Mutable bundle the loop carries between batches and evaluations."""

    model: Seq2Seq
    optimizer: Adam
    scheduler: PlateauScheduler
    gt_table: FrequencyTable
    out_table: FrequencyTable
    weight_vec: np.ndarray | None = None
    best_d1: float = -math.inf
    best_params: dict | None = None
    epoch: int = 0
    global_step: int = 0


@dataclass
class TrainOutcome:
    model: Seq2Seq
    best_d1: float
    checkpoint: Path | None
    log: list[str] = field(default_factory=list)
    audit: dict[int, tuple[int, float, float]] = field(default_factory=dict)
    epochs_run: int = 0
    final_lr: float = 0.0
    gt_table: FrequencyTable | None = None
    out_table: FrequencyTable | None = None


def _strip_eos(ids: Sequence[int]) -> list[int]:
    out = list(ids)
    if out and out[-1] == EOS:
        out.pop()
    return out


def _validation_metrics(model: Seq2Seq, pairs: Sequence[SequencePair],
                        config: TrainConfig) -> tuple[float, float]:
    subset = pairs[:config.valid_cap] if config.valid_cap else pairs
    decoded = model.greedy_decode_batch(
        [p.input_ids for p in subset], config.max_decode_len,
        config.decode_batch_size)
    stripped = [_strip_eos(ids) for ids in decoded]
    if sum(len(s) for s in stripped) == 0:
        return 0.0, 0.0
    grams1: set = set()
    grams2: set = set()
    total = 0
    for s in stripped:
        total += len(s)
        grams1.update((t,) for t in s)
        grams2.update(zip(s, s[1:]))
    return len(grams1) / total, len(grams2) / total


def _unpadded_inputs(batch) -> list[list[int]]:
    return [list(batch.inputs[i, :batch.input_lengths[i]])
            for i in range(batch.size)]


def _update_audit(audit: dict, applied: np.ndarray, targets: np.ndarray,
                  mask: np.ndarray) -> None:
    live = mask > 0
    for tok, w in zip(targets[live].tolist(), applied[live].tolist()):
        if tok in audit:
            n, s, lo = audit[tok]
            audit[tok] = (n + 1, s + w, min(lo, w))
        else:
            audit[tok] = (1, w, w)


def _train_loop(config: TrainConfig, model: Seq2Seq,
                train_pairs: Sequence[SequencePair],
                valid_pairs: Sequence[SequencePair],
                *, refine_mode: bool, optimizer: Adam | None = None,
                out_dir: Path | None = None,
                vocab: Vocabulary | None = None) -> TrainOutcome:
    config.validate()
    lc = config.loss_config()
    if not refine_mode and lc.variant != "ce" and not config.allow_scratch_variants:
        raise UsageError(
            "training from scratch expects the ce loss; refine for the other "
            "variants, or set allow_scratch_variants")
    if not train_pairs:
        raise IngestionError("no training pairs")
    if not valid_pairs:
        raise IngestionError("no validation pairs")

    _, batch_seed, drop_seed = np.random.SeedSequence(config.seed).spawn(3)
    batch_rng = np.random.default_rng(batch_seed)
    drop_rng = np.random.default_rng(drop_seed)

    opt = optimizer if optimizer is not None else Adam(model.params, lr=config.lr)
    state = TrainState(
        model=model,
        optimizer=opt,
        scheduler=PlateauScheduler(opt, config.scheduler_factor,
                                   config.patience, config.plateau_threshold),
        gt_table=FrequencyTable(model.vocab_size, "gt"),
        out_table=FrequencyTable(model.vocab_size, "output"),
    )

    ckpt_path = out_dir / CHECKPOINT_NAME if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.to_file(out_dir / CONFIG_SNAPSHOT_NAME)

    batches_per_epoch = math.ceil(len(train_pairs) / config.batch_size)
    eval_every = config.eval_every if config.eval_every > 0 else batches_per_epoch

    log_lines: list[str] = []
    audit: dict[int, tuple[int, float, float]] = {}
    running_loss, running_n = 0.0, 0
    degenerate_warned = False
    stop = False

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        for batch in make_batches(train_pairs, config.batch_size, batch_rng):
            table = None
            state.weight_vec = None
            if lc.needs_frequency:
                if lc.freq_mode == "gt":
                    state.gt_table.update_gt(batch)
                    table = state.gt_table
                else:
                    decoded = state.model.greedy_decode_batch(
                        _unpadded_inputs(batch), config.max_decode_len,
                        config.decode_batch_size)
                    state.out_table.update_output(decoded)
                    table = state.out_table
                if lc.weight_mode == "pre":
                    try:
                        state.weight_vec = pre_weight(table)
                    except DegenerateFrequencyError:
                        if not degenerate_warned:
                            logger.warning(
                                "degenerate frequency table; using uniform weights")
                            degenerate_warned = True
                        state.weight_vec = np.ones(model.vocab_size)
                        state.weight_vec[0] = 0.0

            last_good = ckpt_path if state.best_params is not None else None
            try:
                tape = Tape()
                fwd = state.model.forward_teacher(
                    tape, batch, dropout_p=config.dropout, rng=drop_rng)
                loss, applied = batch_loss(
                    fwd.step_probs, batch.targets, batch.target_mask, lc,
                    freq_table=table, weight_vec=state.weight_vec)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError("non-finite loss")
                tape.backward(loss)
                grads = {k: t.grad for k, t in fwd.params.items()}
                clip_global_norm(grads, config.clip)
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch} step {state.global_step}: {exc}",
                    checkpoint=last_good) from exc
            state.optimizer.step(grads)
            state.global_step += 1
            running_loss += loss_value
            running_n += 1
            if lc.needs_frequency:
                _update_audit(audit, applied, batch.targets, batch.target_mask)

            if state.global_step % eval_every == 0:
                d1, d2 = _validation_metrics(state.model, valid_pairs, config)
                line = (f"{epoch} {state.global_step} {state.optimizer.lr:.8g} "
                        f"{running_loss / running_n:.6f} {d1:.6f} {d2:.6f}")
                log_lines.append(line)
                logger.info("eval %s", line)
                running_loss, running_n = 0.0, 0
                if d1 > state.best_d1:
                    state.best_d1 = d1
                    state.best_params = state.model.copy_params()
                    if ckpt_path is not None:
                        save_checkpoint(ckpt_path, state.model, state.optimizer)
                state.scheduler.observe(d1)
                if state.scheduler.reductions_since_improve >= config.early_stop_reductions:
                    stop = True
                    break
        if stop:
            break

    if state.best_params is None:
        # no evaluation ever ran; keep the final parameters
        state.best_d1 = 0.0
        state.best_params = state.model.copy_params()
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, state.model, state.optimizer)
    else:
        state.model.load_params(state.best_params)

    if out_dir is not None:
        with open(out_dir / RUN_LOG_NAME, "w", encoding="utf-8") as f:
            for line in log_lines:
                f.write(line + "\n")
        if vocab is not None and lc.needs_frequency:
            table = state.gt_table if lc.freq_mode == "gt" else state.out_table
            table.dump(out_dir / FREQUENCY_DUMP_NAME, vocab)

    return TrainOutcome(
        model=state.model, best_d1=state.best_d1, checkpoint=ckpt_path,
        log=log_lines, audit=audit, epochs_run=state.epoch,
        final_lr=state.optimizer.lr, gt_table=state.gt_table,
        out_table=state.out_table)


def train(config: TrainConfig, train_pairs: Sequence[SequencePair],
          valid_pairs: Sequence[SequencePair], *, model: Seq2Seq | None = None,
          out_dir=None, vocab: Vocabulary | None = None) -> TrainOutcome:
    """Stage one: train (by default with CE) from fresh parameters."""
    if model is None:
        init_seed, _, _ = np.random.SeedSequence(config.seed).spawn(3)
        if vocab is None:
            raise UsageError("either a model or a vocabulary is required")
        model = Seq2Seq(vocab.size, config.hidden_size, config.embed_size,
                        config.layers, seed=init_seed)
    out = Path(out_dir) if out_dir is not None else None
    return _train_loop(config, model, train_pairs, valid_pairs,
                       refine_mode=False, out_dir=out, vocab=vocab)


def refine(config: TrainConfig, base, train_pairs: Sequence[SequencePair],
           valid_pairs: Sequence[SequencePair], *, out_dir=None,
           vocab: Vocabulary | None = None) -> TrainOutcome:
    """Stage two: fine-tune a trained checkpoint with any loss variant.

    `base` is a checkpoint path or a Seq2Seq. The optimizer restarts fresh
    unless resume_optimizer is set and the checkpoint carries moments.
    """
    opt_state = None
    if isinstance(base, Seq2Seq):
        model = Seq2Seq.from_params(base.copy_params())
    else:
        model, opt_state = load_checkpoint(base)
    optimizer = Adam(model.params, lr=config.lr)
    if config.resume_optimizer:
        if opt_state is None:
            raise UsageError("resume_optimizer set but the checkpoint has no moments")
        optimizer.load_state(opt_state)
    out = Path(out_dir) if out_dir is not None else None
    return _train_loop(config, model, train_pairs, valid_pairs,
                       refine_mode=True, optimizer=optimizer, out_dir=out,
                       vocab=vocab)


def evaluate(model_or_path, test_pairs: Sequence[SequencePair],
             vocab: Vocabulary, config: TrainConfig,
             out_dir=None) -> tuple[MetricsReport, list[list[str]]]:
    """Greedy-decode every test input and report d-1/d-2/BLEU."""
    if not test_pairs:
        raise UsageError("empty test set")
    if isinstance(model_or_path, Seq2Seq):
        model = model_or_path
    else:
        model, _ = load_checkpoint(model_or_path)
    decoded = model.greedy_decode_batch(
        [p.input_ids for p in test_pairs], config.max_decode_len,
        config.decode_batch_size)
    hyps = [vocab.decode(_strip_eos(ids)) for ids in decoded]
    refs = [vocab.decode(_strip_eos(p.target_ids)) for p in test_pairs]
    total = sum(len(h) for h in hyps)
    if total == 0:
        report = MetricsReport(0.0, 0.0, 0.0, 0, 0, 0)
    else:
        report = metrics_report(hyps, refs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / RESPONSES_NAME, "w", encoding="utf-8") as f:
            for h in hyps:
                f.write(" ".join(h) + "\n")
        with open(out / REPORT_NAME, "w", encoding="utf-8") as f:
            f.write(report.as_text())
        with open(out / REPORT_RECORD_NAME, "w", encoding="utf-8") as f:
            f.write(report.as_record() + "\n")
    return report, hyps


@dataclass
class AnalyzeResult:
    tables: dict[str, RankTable]
    weight_rows: list[tuple[str, int, float]]  # (token, count, pre-weight)

    def format(self) -> str:
        parts = [t.format() for t in self.tables.values()]
        if self.weight_rows:
            lines = ["# frequency/pre-weight",
                     f"{'token':<16}{'count':>8}{'weight':>10}"]
            for tok, cnt, w in self.weight_rows:
                lines.append(f"{tok:<16}{cnt:>8}{w:>10.4f}")
            parts.append("\n".join(lines) + "\n")
        return "\n".join(parts)


def analyze(responses: Sequence[Sequence[str]],
            after: Sequence[str] = (),
            freq_table: FrequencyTable | None = None,
            vocab: Vocabulary | None = None,
            top_k: int = 20) -> AnalyzeResult:
    """Rank tables over responses plus an optional frequency/weight dump."""
    if not responses:
        raise IngestionError("no responses to analyze")
    tables = {"leading": rank_table(responses)}
    for tok in after:
        tables[f"after({tok})"] = rank_table(responses, after=tok)
    weight_rows: list[tuple[str, int, float]] = []
    if freq_table is not None:
        if vocab is None:
            raise UsageError("a vocabulary is needed to render the weight dump")
        weights = pre_weight(freq_table)
        order = [i for i in np.argsort(-freq_table.counts, kind="stable") if i != 0]
        for idx in order[:top_k]:
            weight_rows.append((vocab.id_to_token[idx],
                                int(freq_table.counts[idx]),
                                float(weights[idx])))
    return AnalyzeResult(tables=tables, weight_rows=weight_rows)
