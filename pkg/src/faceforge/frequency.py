"""Cumulative token-frequency accounting and the two loss-weight functions.

Tables run in one of two modes: "gt" accumulates ground-truth target tokens
batch by batch, "output" accumulates the model's own greedy decodes during
refinement. PAD is excluded from all accounting; EOS is a real token and is
counted.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .corpus import PAD, Batch, Vocabulary
from .errors import DegenerateFrequencyError, UsageError

MODES = ("gt", "output")


class FrequencyTable:
    """Per-token cumulative counts; counts never decrease within a phase."""

    def __init__(self, vocab_size: int, mode: str):
        if mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
        if vocab_size < 2:
            raise UsageError("vocab_size must be at least 2 (PAD plus one token)")
        self.counts = np.zeros(vocab_size, dtype=np.int64)
        self.mode = mode

    @property
    def vocab_size(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update_gt(self, batch: Batch) -> None:
        """Add the batch's non-PAD target tokens to the counts."""
        if self.mode != "gt":
            raise UsageError("update_gt requires a table in 'gt' mode")
        ids = batch.targets[batch.target_mask > 0]
        if ids.size and (ids == PAD).any():
            raise UsageError("batch mask admits PAD target positions")
        self.counts += np.bincount(ids, minlength=self.vocab_size).astype(np.int64)

    def update_output(self, decoded: Iterable[Sequence[int]]) -> None:
        """Add greedy-decoded token ids (EOS included, PAD never produced)."""
        if self.mode != "output":
            raise UsageError("update_output requires a table in 'output' mode")
        flat = [i for seq in decoded for i in seq]
        if not flat:
            return
        ids = np.asarray(flat, dtype=np.int64)
        if (ids == PAD).any():
            raise UsageError("decoded outputs must not contain PAD")
        if (ids < 0).any() or (ids >= self.vocab_size).any():
            raise UsageError("decoded token id out of vocabulary range")
        self.counts += np.bincount(ids, minlength=self.vocab_size).astype(np.int64)

    def copy(self) -> "FrequencyTable":
        out = FrequencyTable(self.vocab_size, self.mode)
        out.counts[...] = self.counts
        return out

    def dump(self, path, vocab: Vocabulary) -> None:
        """Write `token<TAB>count` lines in id order."""
        with open(path, "w", encoding="utf-8") as f:
            for i in range(self.vocab_size):
                f.write(f"{vocab.id_to_token[i]}\t{int(self.counts[i])}\n")

    @classmethod
    def from_dump(cls, path, vocab: Vocabulary, mode: str = "gt") -> "FrequencyTable":
        table = cls(vocab.size, mode)
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, cnt = line.split("\t")
                table.counts[vocab.token_to_id[tok]] = int(cnt)
        return table


def pre_weight(table: FrequencyTable) -> np.ndarray:
    """Per-vocabulary weights, linear in relative frequency.

    Raw weight is 1 - RF_i / max_j RF_j over the non-PAD vocabulary (zero
    counts included), then rescaled to mean 1 over non-PAD tokens. The
    most frequent token gets weight exactly 0; PAD is pinned to 0. When
    every non-PAD token has the same count the weights are uniformly 1.
    """
    body = table.counts[1:].astype(np.float64)
    total = body.sum()
    if total <= 0:
        raise DegenerateFrequencyError("frequency table is empty")
    if int((body > 0).sum()) < 2:
        raise DegenerateFrequencyError(
            "need at least two distinct tokens with nonzero count"
        )
    rf = body / total
    raw = 1.0 - rf / rf.max()
    if np.all(raw == 0.0):
        weights = np.ones_like(body)
    else:
        weights = raw / raw.mean()
    out = np.zeros(table.vocab_size, dtype=np.float64)
    out[1:] = weights
    return out


def post_weight(table: FrequencyTable, output_token: int, gt_token: int) -> float:
    """Conservativeness penalty: scales up the loss when the model's pick
    is more frequent than the ground truth; 1 otherwise. Always in [1, 2]."""
    total = table.total
    if total <= 0:
        raise DegenerateFrequencyError("frequency table is empty")
    diff = int(table.counts[output_token]) - int(table.counts[gt_token])
    return 1.0 + max(0, diff) / total


def post_weight_array(table: FrequencyTable, output_tokens: np.ndarray,
                      gt_tokens: np.ndarray) -> np.ndarray:
    """Vectorized post_weight over aligned output/ground-truth id arrays."""
    total = table.total
    if total <= 0:
        raise DegenerateFrequencyError("frequency table is empty")
    diff = table.counts[output_tokens] - table.counts[gt_tokens]
    return 1.0 + np.maximum(0, diff) / total
