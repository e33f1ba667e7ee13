"""Vocabulary, message-response ingestion, batching, and a skewed synthetic corpus.

Tokenization is lowercased whitespace splitting. Pair files are UTF-8 text,
one example per line, input and response separated by a single TAB; multi-turn
context is joined by " __sep__ " inside the input field. Vocabulary files hold
one token per line where line number = id - 4 (the four reserved ids are
implicit).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestionError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
SEP_TOKEN = "__sep__"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def join_context(turns: Sequence[str]) -> str:
    """Join multi-turn context into one input field for the pair format."""
    return f" {SEP_TOKEN} ".join(turns)


class Vocabulary:
    """Token <-> id map over the most frequent corpus tokens.

    Ids 0..3 are reserved for PAD/UNK/BOS/EOS; out-of-vocabulary tokens
    encode to UNK.
    """

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise IngestionError("duplicate tokens in vocabulary")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, lines: Iterable[str], max_size: int) -> "Vocabulary":
        """Keep the max_size most frequent tokens; ties break by first occurrence."""
        counts: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        pos = 0
        for line in lines:
            for tok in tokenize(line):
                if tok in RESERVED:
                    continue
                counts[tok] += 1
                if tok not in first_seen:
                    first_seen[tok] = pos
                    pos += 1
        if not counts:
            raise IngestionError("empty corpus: no tokens to build a vocabulary from")
        ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
        return cls(ranked[:max_size])

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token[len(RESERVED):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


@dataclass(frozen=True)
class SequencePair:
    """Encoded message/response pair; the target always ends with EOS."""

    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.input_ids) < 1 or len(self.target_ids) < 1:
            raise IngestionError("sequence pair sides must be non-empty")
        if self.target_ids[-1] != EOS:
            raise IngestionError("target must be terminated by EOS")


def encode_pair(vocab: Vocabulary, message: str, response: str) -> SequencePair:
    msg = vocab.encode(tokenize(message))
    resp = vocab.encode(tokenize(response))
    if not msg or not resp:
        raise IngestionError(f"empty side in pair: {message!r} -> {response!r}")
    return SequencePair(tuple(msg), tuple(resp) + (EOS,))


@dataclass(frozen=True)
class Batch:
    """Padded input/target id matrices with masks marking real positions."""

    inputs: np.ndarray        # (B, S) int64, PAD-padded
    targets: np.ndarray       # (B, T) int64, PAD-padded, rows end with EOS
    input_mask: np.ndarray    # (B, S) float64, 1.0 at non-PAD
    target_mask: np.ndarray   # (B, T) float64, 1.0 at non-PAD
    input_lengths: np.ndarray
    target_lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_batch(pairs: Sequence[SequencePair]) -> Batch:
    if not pairs:
        raise IngestionError("cannot build an empty batch")
    in_lens = np.array([len(p.input_ids) for p in pairs], dtype=np.int64)
    tgt_lens = np.array([len(p.target_ids) for p in pairs], dtype=np.int64)
    s, t = int(in_lens.max()), int(tgt_lens.max())
    b = len(pairs)
    inputs = np.full((b, s), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    for i, p in enumerate(pairs):
        inputs[i, :len(p.input_ids)] = p.input_ids
        targets[i, :len(p.target_ids)] = p.target_ids
    input_mask = (inputs != PAD).astype(np.float64)
    target_mask = (targets != PAD).astype(np.float64)
    return Batch(inputs, targets, input_mask, target_mask, in_lens, tgt_lens)


def make_batches(pairs: Sequence[SequencePair], batch_size: int,
                 rng: np.random.Generator) -> list[Batch]:
    """Shuffle pairs, then pack into batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    return [make_batch(shuffled[i:i + batch_size])
            for i in range(0, len(shuffled), batch_size)]


# -- pair files ------------------------------------------------------------


def read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestionError(
                    f"{path}:{lineno}: expected exactly one TAB, got {len(parts) - 1}"
                )
            pairs.append((parts[0], parts[1]))
    if not pairs:
        raise IngestionError(f"{path}: no pairs found")
    return pairs


def write_pairs(path, pairs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for msg, resp in pairs:
            f.write(f"{msg}\t{resp}\n")


def filter_pairs(pairs: Sequence[tuple[str, str]], min_len: int,
                 stage: str = "before",
                 vocab: Vocabulary | None = None) -> list[tuple[str, str]]:
    """Drop pairs whose message or response is shorter than min_len tokens.

    stage "before" counts raw tokens; "after" counts in-vocabulary tokens
    (UNK replacements excluded) and requires a vocabulary.
    """
    if min_len <= 0:
        return list(pairs)
    if stage not in ("before", "after"):
        raise ValueError(f"unknown filter stage {stage!r}")
    if stage == "after" and vocab is None:
        raise ValueError("filter stage 'after' needs a vocabulary")

    def length(text: str) -> int:
        toks = tokenize(text)
        if stage == "before":
            return len(toks)
        return sum(1 for i in vocab.encode(toks) if i != UNK)

    return [(m, r) for m, r in pairs if length(m) >= min_len and length(r) >= min_len]


def load_dataset(path, vocab: Vocabulary, min_len: int = 0,
                 filter_stage: str = "before") -> list[SequencePair]:
    text_pairs = filter_pairs(read_pairs(path), min_len, filter_stage, vocab)
    if not text_pairs:
        raise IngestionError(f"{path}: no pairs left after length filtering")
    return [encode_pair(vocab, m, r) for m, r in text_pairs]


# -- synthetic corpus --------------------------------------------------------

# Message/response templates for the synthetic generator. The list order is
# the Zipf rank order: generic responses sit at the head so a positive
# exponent concentrates response mass on them, mimicking the leading-token
# skew of real dialogue corpora.
DEFAULT_TEMPLATES: list[tuple[str, str]] = [
    ("how are you doing today", "i do n't know ."),
    ("what did you think of the show", "i 'm sorry ."),
    ("do you want to come along", "i 'm not sure ."),
    ("did you finish the report yet", "i think so ."),
    ("are you coming to the party", "yes of course ."),
    ("have you seen my keys anywhere", "no idea at all ."),
    ("what should we cook tonight", "let 's make spicy lentil soup tonight"),
    ("where did you go last weekend", "we hiked up the granite ridge trail"),
    ("how was the concert last night", "the drummer stole the whole show"),
    ("what are you reading these days", "a biography of an arctic explorer"),
    ("when does the next train leave", "the express departs at nine forty"),
    ("why is the kitchen such a mess", "the blender exploded with berry smoothie"),
    ("who won the match yesterday", "the visitors won by two goals"),
    ("what is your favorite season", "autumn because the maples turn crimson"),
    ("can you fix the leaking tap", "i need a new rubber washer first"),
    ("should we paint the fence blue", "green would suit the garden better"),
    ("how is your little brother", "he just started learning the violin"),
    ("what happened to your bicycle", "the chain snapped on the hill"),
    ("do you trust the weather forecast", "it promised sunshine but delivered hail"),
    ("where shall we meet tomorrow", "under the clock at the station"),
    ("what did the doctor say", "just rest and plenty of fluids"),
    ("have you tried the new cafe", "their cardamom buns are outstanding"),
    ("why did the lights go out", "a storm knocked down a cable"),
    ("how do you like the city", "noisy but the museums are wonderful"),
    ("what will you plant this spring", "heirloom tomatoes and purple basil"),
    ("did the package arrive on time", "it came two days late unfortunately"),
    ("who taught you to play chess", "my grandfather during long winter evenings"),
    ("what song is stuck in your head", "an old jazz tune about trains"),
    ("how far is the lighthouse", "about six miles along the cliffs"),
    ("are the roads icy this morning", "only the bridge near the mill"),
    ("what scared the cat so badly", "a vacuum cleaner in the hallway"),
    ("when will the bakery open", "at dawn like every market day"),
    ("do you remember our old teacher", "she retired to a seaside cottage"),
    ("what broke the washing machine", "a coin jammed in the drum"),
    ("how did the interview go", "they asked about distributed strange systems"),
    ("where does this path lead", "down to an abandoned slate quarry"),
    ("why are you smiling like that", "i finally solved the stubborn puzzle"),
    ("what smells so good in here", "fresh bread with rosemary and garlic"),
    ("can we swim in the lake", "the water is still too cold"),
    ("what time does the ferry sail", "at noon if the fog lifts"),
]


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    """Normalized rank weights: weight of rank k proportional to k**-exponent."""
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -float(exponent)
    return w / w.sum()


def synth_corpus(templates: Sequence[tuple[str, str]] | None = None,
                 exponent: float = 1.3, size: int = 1000, seed: int = 0,
                 fidelity: float = 0.15) -> list[tuple[str, str]]:
    """Generate message-response pairs with Zipf-skewed response usage.

    Messages are drawn uniformly over the templates. With probability
    `fidelity` the paired response is the message's own template response
    (the learnable signal); otherwise the response template is drawn from
    the Zipf table over ranks, so the head templates dominate.
    """
    if templates is None:
        templates = DEFAULT_TEMPLATES
    if len(templates) < 2:
        raise ValueError("need at least two templates")
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity must be in [0, 1]")
    k = len(templates)
    rng = np.random.default_rng(seed)
    weights = zipf_weights(k, exponent)
    msg_idx = rng.integers(0, k, size=size)
    own = rng.random(size) < fidelity
    drawn = rng.choice(k, size=size, p=weights)
    resp_idx = np.where(own, msg_idx, drawn)
    return [(templates[i][0], templates[j][1])
            for i, j in zip(msg_idx, resp_idx)]


def split_corpus(pairs: Sequence[tuple[str, str]], valid_frac: float,
                 test_frac: float, seed: int = 0):
    """Deterministic train/valid/test split of text pairs."""
    if valid_frac < 0 or test_frac < 0 or valid_frac + test_frac >= 1:
        raise ValueError("fractions must be non-negative and sum to < 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_valid = int(math.floor(len(pairs) * valid_frac))
    n_test = int(math.floor(len(pairs) * test_frac))
    valid = [pairs[i] for i in order[:n_valid]]
    test = [pairs[i] for i in order[n_valid:n_valid + n_test]]
    train = [pairs[i] for i in order[n_valid + n_test:]]
    return train, valid, test
