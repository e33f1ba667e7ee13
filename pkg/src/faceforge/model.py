"""Compact GRU encoder-decoder with bilinear ("general") attention.

One shared forward implementation serves both training (params watched on a
tape) and evaluation (params as constants, nothing recorded). Decoding is
greedy: emit the argmax at each step, feed it back, stop at EOS or max_len.

The cell is a GRU rather than an LSTM: the loss machinery is cell-agnostic
and the GRU halves the recurrent parameter count at desk scale. See CELL.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import BOS, EOS, Batch
from .errors import StructuralError, UsageError
from .losses import PredictedDistribution

CELL = "gru"
CHECKPOINT_MAGIC = "FACEFORGE-CKPT v1"

_GATES = ("z", "r", "c")
_ATTN_MASK_OFFSET = -1e9  # added to scores at PAD encoder positions


@dataclass
class DecodeStep:
    """One greedy/teacher step: top hidden state, attention, and prediction."""

    hidden: np.ndarray
    context: np.ndarray
    attention: np.ndarray
    dist: PredictedDistribution


@dataclass
class TeacherForward:
    """Teacher-forced forward pass: per-step distributions plus the watched
    parameter leaves (for reading gradients after backward)."""

    step_probs: list[Tensor]
    params: dict[str, Tensor]


class Seq2Seq:
    """Encoder-decoder over a fixed vocabulary.

    Weights initialize from U(-sqrt(1/hidden), +sqrt(1/hidden)); embeddings
    from N(0, 1). Sizes default to desk scale; larger values are legal.
    """

    def __init__(self, vocab_size: int, hidden_size: int = 64,
                 embed_size: int = 32, layers: int = 1, seed: int = 0):
        if vocab_size <= EOS:
            raise UsageError("vocabulary must include the reserved ids")
        if layers < 1:
            raise UsageError("need at least one recurrent layer")
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.layers = layers
        rng = np.random.default_rng(seed)
        bound = np.sqrt(1.0 / hidden_size)
        u = lambda shape: rng.uniform(-bound, bound, size=shape)
        params: dict[str, np.ndarray] = {}
        params["emb"] = rng.standard_normal((vocab_size, embed_size))
        for side in ("enc", "dec"):
            for layer in range(layers):
                in_dim = embed_size if layer == 0 else hidden_size
                for gate in _GATES:
                    params[f"{side}{layer}_W{gate}"] = u((in_dim, hidden_size))
                    params[f"{side}{layer}_U{gate}"] = u((hidden_size, hidden_size))
                    params[f"{side}{layer}_b{gate}"] = u((1, hidden_size))
        params["attn_W"] = u((hidden_size, hidden_size))
        params["out_W"] = u((2 * hidden_size, vocab_size))
        params["out_b"] = u((1, vocab_size))
        self.params = params

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "Seq2Seq":
        """Rebuild a model from named arrays; sizes come from the shapes."""
        vocab_size, embed_size = params["emb"].shape
        hidden_size = params["attn_W"].shape[0]
        layers = 1 + max(
            int(m.group(1)) for k in params
            if (m := re.match(r"enc(\d+)_Wz$", k))
        )
        model = cls.__new__(cls)
        model.vocab_size = int(vocab_size)
        model.hidden_size = int(hidden_size)
        model.embed_size = int(embed_size)
        model.layers = int(layers)
        model.params = {k: np.ascontiguousarray(v, dtype=np.float64)
                        for k, v in params.items()}
        return model

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            self.params[k][...] = v

    # -- shared forward pieces ------------------------------------------

    def _wrap(self, tape: Tape | None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def _gru_stack(self, p: dict[str, Tensor], side: str, x: Tensor,
                   hidden: list[Tensor]) -> list[Tensor]:
        new_hidden = []
        for layer in range(self.layers):
            h = hidden[layer]
            z = ad.sigmoid(x @ p[f"{side}{layer}_Wz"] + h @ p[f"{side}{layer}_Uz"]
                           + p[f"{side}{layer}_bz"])
            r = ad.sigmoid(x @ p[f"{side}{layer}_Wr"] + h @ p[f"{side}{layer}_Ur"]
                           + p[f"{side}{layer}_br"])
            c = ad.tanh(x @ p[f"{side}{layer}_Wc"] + (r * h) @ p[f"{side}{layer}_Uc"]
                        + p[f"{side}{layer}_bc"])
            h_new = (1.0 - z) * c + z * h
            new_hidden.append(h_new)
            x = h_new
        return new_hidden

    def _encode_batch(self, p: dict[str, Tensor], inputs: np.ndarray,
                      input_mask: np.ndarray,
                      drop: "_Dropout | None" = None) -> tuple[list[Tensor], list[Tensor]]:
        """Run the encoder; returns per-position top states and final hidden.

        The hidden state freezes at PAD positions so the final state per row
        is the state at its last real token.
        """
        b, s = inputs.shape
        hidden = [Tensor(np.zeros((b, self.hidden_size))) for _ in range(self.layers)]
        tops: list[Tensor] = []
        for t in range(s):
            x = ad.gather_rows(p["emb"], inputs[:, t])
            if drop is not None:
                x = x * drop.mask(x.shape)
            new_hidden = self._gru_stack(p, "enc", x, hidden)
            m = input_mask[:, t:t + 1]
            if m.all():
                hidden = new_hidden
            else:
                mt = Tensor(m)
                hidden = [mt * nh + (1.0 - mt) * oh
                          for nh, oh in zip(new_hidden, hidden)]
            tops.append(hidden[-1])
        return tops, hidden

    def _decode_step_batch(self, p: dict[str, Tensor], prev_ids: np.ndarray,
                           hidden: list[Tensor], enc_tops: list[Tensor],
                           attn_offset: np.ndarray | None,
                           drop: "_Dropout | None" = None
                           ) -> tuple[Tensor, list[Tensor], Tensor, Tensor]:
        """One decoder step; returns (probs, hidden, attention, context)."""
        x = ad.gather_rows(p["emb"], prev_ids)
        if drop is not None:
            x = x * drop.mask(x.shape)
        new_hidden = self._gru_stack(p, "dec", x, hidden)
        h_top = new_hidden[-1]
        q = h_top @ p["attn_W"]
        scores = ad.concat_cols([ad.sum_rows(q * e) for e in enc_tops])
        if attn_offset is not None:
            scores = scores + Tensor(attn_offset)
        attn = ad.softmax_rows(scores)
        context: Tensor | None = None
        for s, enc in enumerate(enc_tops):
            piece = ad.col(attn, s) * enc
            context = piece if context is None else context + piece
        feat = ad.concat_cols([h_top, context])
        if drop is not None:
            feat = feat * drop.mask(feat.shape)
        logits = feat @ p["out_W"] + p["out_b"]
        probs = ad.softmax_rows(logits)
        return probs, new_hidden, attn, context

    @staticmethod
    def _attn_offset(input_mask: np.ndarray) -> np.ndarray | None:
        """Score offset of 0 at real positions, _ATTN_MASK_OFFSET at PAD."""
        if input_mask.all():
            return None
        return (1.0 - input_mask) * _ATTN_MASK_OFFSET

    # -- training-facing ops ----------------------------------------------

    def forward_teacher(self, tape: Tape | None, batch: Batch,
                        dropout_p: float = 0.0,
                        rng: np.random.Generator | None = None,
                        params: dict[str, Tensor] | None = None) -> TeacherForward:
        """Teacher-forced pass: decoder input at step t is the gold token
        y_{t-1} (BOS at t=0); one distribution per target column.

        `params` lets callers reuse already-wrapped leaves (the wrappers
        alias the underlying arrays, so in-place edits are visible)."""
        p = params if params is not None else self._wrap(tape)
        drop = _Dropout(dropout_p, rng) if dropout_p > 0 else None
        enc_tops, hidden = self._encode_batch(p, batch.inputs, batch.input_mask, drop)
        offset = self._attn_offset(batch.input_mask)
        b, t_out = batch.targets.shape
        dec_inputs = np.concatenate(
            [np.full((b, 1), BOS, dtype=np.int64), batch.targets[:, :-1]], axis=1)
        step_probs = []
        for t in range(t_out):
            probs, hidden, _, _ = self._decode_step_batch(
                p, dec_inputs[:, t], hidden, enc_tops, offset, drop)
            step_probs.append(probs)
        return TeacherForward(step_probs, p)

    # -- single-sequence surfaces ------------------------------------------

    def encode(self, input_ids: Sequence[int]) -> np.ndarray:
        """Encoder states for one sequence, one row per input position."""
        if len(input_ids) == 0:
            raise UsageError("cannot encode an empty input")
        p = self._wrap(None)
        inputs = np.asarray(input_ids, dtype=np.int64).reshape(1, -1)
        tops, _ = self._encode_batch(p, inputs, np.ones_like(inputs, dtype=np.float64))
        return np.concatenate([t.value for t in tops], axis=0)

    def decode_step(self, prev_token: int, prev_hidden: list[np.ndarray] | None,
                    encoder_states: np.ndarray) -> tuple[DecodeStep, list[np.ndarray]]:
        """One greedy-decoder step over precomputed encoder states."""
        if not 0 <= prev_token < self.vocab_size:
            raise UsageError(f"token {prev_token} outside vocabulary")
        p = self._wrap(None)
        if prev_hidden is None:
            prev_hidden = [np.zeros((1, self.hidden_size)) for _ in range(self.layers)]
        hidden = [Tensor(h) for h in prev_hidden]
        enc_tops = [Tensor(encoder_states[s:s + 1]) for s in range(encoder_states.shape[0])]
        probs, new_hidden, attn, context = self._decode_step_batch(
            p, np.array([prev_token]), hidden, enc_tops, None)
        step = DecodeStep(
            hidden=new_hidden[-1].value.copy(),
            context=context.value.copy(),
            attention=attn.value.copy(),
            dist=PredictedDistribution(probs.value),
        )
        return step, [h.value for h in new_hidden]

    # -- greedy decoding ----------------------------------------------------

    def greedy_decode(self, input_ids: Sequence[int], max_len: int) -> list[int]:
        """Greedy decode one input; includes the terminating EOS if emitted.

        Ties break toward the lowest token id (argmax convention).
        """
        if max_len < 1:
            raise UsageError("max_len must be >= 1")
        return self.greedy_decode_batch([input_ids], max_len, batch_size=1)[0]

    def greedy_decode_batch(self, inputs: Sequence[Sequence[int]], max_len: int,
                            batch_size: int = 32) -> list[list[int]]:
        """Greedy decode many inputs in fixed-size chunks, preserving order."""
        if max_len < 1:
            raise UsageError("max_len must be >= 1")
        results: list[list[int]] = []
        for start in range(0, len(inputs), batch_size):
            chunk = [list(seq) for seq in inputs[start:start + batch_size]]
            results.extend(self._greedy_chunk(chunk, max_len))
        return results

    def _greedy_chunk(self, chunk: list[list[int]], max_len: int) -> list[list[int]]:
        for seq in chunk:
            if len(seq) == 0:
                raise UsageError("cannot decode an empty input")
        b = len(chunk)
        s = max(len(seq) for seq in chunk)
        inputs = np.zeros((b, s), dtype=np.int64)
        mask = np.zeros((b, s), dtype=np.float64)
        for i, seq in enumerate(chunk):
            inputs[i, :len(seq)] = seq
            mask[i, :len(seq)] = 1.0
        p = self._wrap(None)
        enc_tops, hidden = self._encode_batch(p, inputs, mask)
        offset = self._attn_offset(mask)
        prev = np.full(b, BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            probs, hidden, _, _ = self._decode_step_batch(p, prev, hidden, enc_tops, offset)
            toks = np.argmax(probs.value, axis=1)
            for i in range(b):
                if done[i]:
                    continue
                outs[i].append(int(toks[i]))
                if toks[i] == EOS:
                    done[i] = True
            if done.all():
                break
            prev = toks
        return outs


class _Dropout:
    """Per-call inverted-dropout masks from a dedicated generator."""

    def __init__(self, p: float, rng: np.random.Generator | None):
        if rng is None:
            raise UsageError("dropout needs a random generator")
        self.p = p
        self.rng = rng

    def mask(self, shape) -> Tensor:
        return Tensor(ad.dropout_mask(shape, self.p, self.rng))


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: Seq2Seq, optimizer=None) -> None:
    """Write the exact binary checkpoint format: a magic header line, then
    one `name rows cols` text line plus row-major little-endian float64
    payload per record. Optimizer moments ride along as opt.* records."""
    records: list[tuple[str, np.ndarray]] = sorted(model.params.items())
    if optimizer is not None:
        records.append(("opt.step", np.array([[float(optimizer.step_count)]])))
        records.extend((f"opt.m.{k}", v) for k, v in sorted(optimizer.m.items()))
        records.extend((f"opt.v.{k}", v) for k, v in sorted(optimizer.v.items()))
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("utf-8"))
        for name, arr in records:
            rows, cols = arr.shape
            f.write(f"{name} {rows} {cols}\n".encode("utf-8"))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Seq2Seq, dict | None]:
    """Read a checkpoint; returns the model and optimizer state (or None)."""
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    opt_step: int | None = None
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise StructuralError(f"not a checkpoint file (header {magic!r})")
        while True:
            header = f.readline()
            if not header:
                break
            name, rows, cols = header.decode("utf-8").split()
            rows, cols = int(rows), int(cols)
            payload = f.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise StructuralError(f"truncated record {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
            if name == "opt.step":
                opt_step = int(arr[0, 0])
            elif name.startswith("opt.m."):
                opt_m[name[6:]] = arr
            elif name.startswith("opt.v."):
                opt_v[name[6:]] = arr
            else:
                params[name] = arr
    model = Seq2Seq.from_params(params)
    if opt_step is None:
        return model, None
    return model, {"step": opt_step, "m": opt_m, "v": opt_v}
