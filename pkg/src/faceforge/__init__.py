"""Frequency-aware cross-entropy training toolkit for desk-scale
sequence-to-sequence response generation."""

from .autodiff import (Adam, Tape, Tensor, clip_global_norm, dropout_mask,
                       softmax_rows)
from .corpus import (BOS, EOS, PAD, UNK, Batch, SequencePair, Vocabulary,
                     encode_pair, join_context, make_batches, synth_corpus,
                     tokenize)
from .errors import (DegenerateFrequencyError, FaceforgeError, IngestionError,
                     MetricError, NumericError, StructuralError,
                     TrainingDivergedError, UsageError)
from .estimator import FaceSeq2Seq
from .frequency import FrequencyTable, post_weight, pre_weight
from .losses import (LossConfig, PredictedDistribution, batch_loss, ce,
                     combined, cp, cp_free, cp_weight, face)
from .metrics import MetricsReport, RankTable, bleu, distinct_n, rank_table
from .model import DecodeStep, Seq2Seq, load_checkpoint, save_checkpoint
from .training import (TrainConfig, TrainOutcome, analyze, evaluate, refine,
                       train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "Batch", "BOS", "DecodeStep", "DegenerateFrequencyError", "EOS",
    "FaceforgeError", "FaceSeq2Seq", "FrequencyTable", "IngestionError",
    "LossConfig", "MetricError", "MetricsReport", "NumericError", "PAD",
    "PredictedDistribution", "RankTable", "Seq2Seq", "SequencePair",
    "StructuralError", "Tape", "Tensor", "TrainConfig", "TrainOutcome",
    "TrainingDivergedError", "UNK", "UsageError", "Vocabulary", "analyze",
    "batch_loss", "bleu", "ce", "clip_global_norm", "combined", "cp",
    "cp_free", "cp_weight", "distinct_n", "dropout_mask", "encode_pair",
    "evaluate", "face", "join_context", "load_checkpoint", "make_batches",
    "post_weight",
    "pre_weight", "rank_table", "refine", "save_checkpoint", "softmax_rows",
    "synth_corpus", "tokenize", "train",
]
