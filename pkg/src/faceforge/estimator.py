"""Sklearn-style front end: fit runs train-and-refine, predict decodes.

The estimator follows the scikit-learn conventions (parameters stored
verbatim in __init__, fitted attributes carry a trailing underscore,
get_params/set_params/clone work), so the trainer composes with the wider
ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Vocabulary, encode_pair, tokenize
from .metrics import bleu
from .training import TrainConfig, _strip_eos, refine, train


def check_text_list(x, name: str) -> list[str]:
    """Validate a 1-D collection of non-empty strings."""
    if isinstance(x, str):
        raise ValueError(f"{name} must be a sequence of strings, not a single string")
    try:
        items = list(x)
    except TypeError:
        raise ValueError(f"{name} must be an iterable of strings") from None
    if not items:
        raise ValueError(f"{name} is empty")
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise ValueError(f"{name}[{i}] is {type(item).__name__}, expected str")
        if not item.strip():
            raise ValueError(f"{name}[{i}] is blank")
    return items


def check_parallel_texts(x, y) -> tuple[list[str], list[str]]:
    msgs = check_text_list(x, "X")
    resps = check_text_list(y, "y")
    if len(msgs) != len(resps):
        raise ValueError(f"X and y lengths differ: {len(msgs)} vs {len(resps)}")
    return msgs, resps


class FaceSeq2Seq(BaseEstimator):
    """Dialogue-response generator trained with a frequency-aware loss.

    fit(X, y) builds a vocabulary, trains with cross-entropy, then (for any
    loss other than "ce") fine-tunes with the configured variant. predict(X)
    greedy-decodes responses; score(X, y) is corpus BLEU against y.
    """

    def __init__(self, loss: str = "face-opr", hidden_size: int = 64,
                 embed_size: int = 32, layers: int = 1, vocab_size: int = 1000,
                 epochs: int = 8, refine_epochs: int = 2, batch_size: int = 64,
                 refine_batch_size: int = 30, lr: float = 0.001,
                 beta: float = 0.01, dropout: float = 0.1, clip: float = 5.0,
                 patience: int = 3, valid_frac: float = 0.1,
                 max_decode_len: int = 20, seed: int = 0):
        self.loss = loss
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        self.layers = layers
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.refine_epochs = refine_epochs
        self.batch_size = batch_size
        self.refine_batch_size = refine_batch_size
        self.lr = lr
        self.beta = beta
        self.dropout = dropout
        self.clip = clip
        self.patience = patience
        self.valid_frac = valid_frac
        self.max_decode_len = max_decode_len
        self.seed = seed

    def _config(self, stage: str) -> TrainConfig:
        refine_stage = stage == "refine"
        return TrainConfig(
            loss=self.loss if refine_stage else "ce",
            beta=self.beta,
            batch_size=self.refine_batch_size if refine_stage else self.batch_size,
            lr=self.lr,
            clip=self.clip,
            dropout=self.dropout,
            patience=self.patience,
            max_epochs=self.refine_epochs if refine_stage else self.epochs,
            seed=self.seed,
            hidden_size=self.hidden_size,
            embed_size=self.embed_size,
            layers=self.layers,
            vocab_size=self.vocab_size,
            max_decode_len=self.max_decode_len,
        )

    def fit(self, X, y):
        msgs, resps = check_parallel_texts(X, y)
        self.vocab_ = Vocabulary.build(
            [f"{m} {r}" for m, r in zip(msgs, resps)], self.vocab_size)
        pairs = [encode_pair(self.vocab_, m, r) for m, r in zip(msgs, resps)]
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(pairs))
        n_valid = max(1, int(len(pairs) * self.valid_frac))
        if n_valid >= len(pairs):
            n_valid = len(pairs) - 1 or 1
        valid = [pairs[i] for i in order[:n_valid]]
        train_split = [pairs[i] for i in order[n_valid:]] or valid
        outcome = train(self._config("train"), train_split, valid, vocab=self.vocab_)
        self.history_ = list(outcome.log)
        if self.loss != "ce":
            outcome = refine(self._config("refine"), outcome.model,
                             train_split, valid, vocab=self.vocab_)
            self.history_.extend(outcome.log)
        self.model_ = outcome.model
        self.best_d1_ = outcome.best_d1
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self)
        msgs = check_text_list(X, "X")
        inputs = [self.vocab_.encode(tokenize(m)) for m in msgs]
        decoded = self.model_.greedy_decode_batch(inputs, self.max_decode_len)
        return [" ".join(self.vocab_.decode(_strip_eos(ids))) for ids in decoded]

    def score(self, X, y) -> float:
        """Corpus BLEU of greedy decodes against the reference responses."""
        check_is_fitted(self)
        msgs, resps = check_parallel_texts(X, y)
        hyps = [p.split() for p in self.predict(msgs)]
        refs = [tokenize(r) for r in resps]
        return bleu(hyps, refs)

    def diversity(self, X) -> dict[str, float]:
        """d-1 and d-2 of the greedy decodes for the given messages."""
        check_is_fitted(self)
        hyps = [p.split() for p in self.predict(X)]
        total = sum(len(h) for h in hyps)
        if total == 0:
            return {"d1": 0.0, "d2": 0.0}
        uni = {(t,) for h in hyps for t in h}
        bi = {g for h in hyps for g in zip(h, h[1:])}
        return {"d1": len(uni) / total, "d2": len(bi) / total}
