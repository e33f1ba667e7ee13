"""The frequency-aware loss family.

Covers plain cross-entropy, frequency-weighted cross-entropy under the four
frequency/weight mode combinations, the confidence penalty, its
parameter-free form, and the two combinations of the weighted loss with a
confidence penalty. Frequency-derived weights are constants during
backpropagation; the entropy terms added in the penalty variants do carry
gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD
from .errors import UsageError
from .frequency import FrequencyTable, post_weight, post_weight_array

logger = logging.getLogger(__name__)

VARIANTS = ("ce", "face", "cp", "cp_free", "face_cp", "face_cp_free")
FREQ_MODES = ("gt", "output")
WEIGHT_MODES = ("pre", "post")

PROB_FLOOR = 1e-12

# CLI/config loss names -> (variant, freq_mode, weight_mode)
LOSS_NAMES = {
    "ce": ("ce", None, None),
    "cp": ("cp", None, None),
    "cp-free": ("cp_free", None, None),
    "face-opr": ("face", "output", "pre"),
    "face-opo": ("face", "output", "post"),
    "face-gpr": ("face", "gt", "pre"),
    "face-gpo": ("face", "gt", "post"),
    "face-cp": ("face_cp", "output", "pre"),
    "face-cp-free": ("face_cp_free", "output", "pre"),
}

_clamp_logged = False


def _log_clamp_once() -> None:
    global _clamp_logged
    if not _clamp_logged:
        logger.warning("target probability below %g clamped", PROB_FLOOR)
        _clamp_logged = True


class PredictedDistribution:
    """One decode step's softmax output over the vocabulary, with entropy."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        t = probs if isinstance(probs, Tensor) else Tensor(probs)
        if t.value.shape[0] != 1:
            raise UsageError("a predicted distribution is a single row")
        s = float(t.value.sum())
        if abs(s - 1.0) > 1e-9 or (t.value < 0).any():
            raise UsageError(f"probabilities must form a simplex (sum={s})")
        self.probs = t

    @classmethod
    def from_logits(cls, logits) -> "PredictedDistribution":
        return cls(ad.softmax_rows(logits))

    @property
    def size(self) -> int:
        return self.probs.value.shape[1]

    def prob(self, i: int) -> float:
        return float(self.probs.value[0, i])

    def argmax(self) -> int:
        return int(np.argmax(self.probs.value[0]))

    def entropy(self) -> Tensor:
        """Shannon entropy (natural log) as a 1x1 tensor on the same tape."""
        return ad.entropy_rows(self.probs)

    def entropy_value(self) -> float:
        return float(self.entropy().value[0, 0])


@dataclass
class LossConfig:
    """Which loss to run and with what knobs.

    freq_mode and weight_mode matter only for the face-family variants;
    beta only for the variants that subtract a scaled entropy.
    """

    variant: str = "ce"
    freq_mode: str | None = None
    weight_mode: str | None = None
    beta: float = 0.01
    entropy_floor: float = 1e-8

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown loss variant {self.variant!r}")
        if self.variant in ("cp", "face_cp") and self.beta <= 0:
            raise UsageError("beta must be positive for confidence-penalty losses")
        if self.entropy_floor <= 0:
            raise UsageError("entropy_floor must be positive")
        if self.needs_frequency:
            if self.freq_mode not in FREQ_MODES:
                raise UsageError(
                    f"variant {self.variant!r} needs freq_mode in {FREQ_MODES}"
                )
            if self.weight_mode not in WEIGHT_MODES:
                raise UsageError(
                    f"variant {self.variant!r} needs weight_mode in {WEIGHT_MODES}"
                )

    @property
    def needs_frequency(self) -> bool:
        return self.variant in ("face", "face_cp", "face_cp_free")

    @property
    def has_entropy_bonus(self) -> bool:
        return self.variant in ("cp", "cp_free", "face_cp")

    @classmethod
    def from_name(cls, name: str, beta: float = 0.01, entropy_floor: float = 1e-8,
                  freq_mode: str | None = None,
                  weight_mode: str | None = None) -> "LossConfig":
        key = name.strip().lower().replace("_", "-")
        if key not in LOSS_NAMES:
            raise UsageError(f"unknown loss name {name!r}; choose from {sorted(LOSS_NAMES)}")
        variant, fm, wm = LOSS_NAMES[key]
        cfg = cls(variant=variant, freq_mode=freq_mode or fm,
                  weight_mode=weight_mode or wm, beta=beta,
                  entropy_floor=entropy_floor)
        cfg.validate()
        return cfg


# -- per-step losses ---------------------------------------------------------


def _check_target(dist: PredictedDistribution, target: int) -> None:
    if not 0 <= target < dist.size:
        raise UsageError(f"target {target} outside vocabulary of {dist.size}")
    if target == PAD:
        raise UsageError("PAD is excluded from the loss")


def ce(dist: PredictedDistribution, target: int) -> Tensor:
    """Cross-entropy -log P(target); the probability is floored at 1e-12."""
    _check_target(dist, target)
    picked = ad.gather_cols(dist.probs, [target])
    if picked.value[0, 0] < PROB_FLOOR:
        _log_clamp_once()
    return ad.neg(ad.log(ad.maximum_scalar(picked, PROB_FLOOR)))


def face(dist: PredictedDistribution, target: int, w: float) -> Tensor:
    """Frequency-weighted cross-entropy: w * ce. Reduces to ce at w = 1."""
    if w < 0:
        raise ValueError(f"face weight must be non-negative, got {w}")
    return ce(dist, target) * float(w)


def cp(dist: PredictedDistribution, target: int, beta: float = 0.01) -> Tensor:
    """Confidence penalty: ce - beta * entropy. May go negative."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return ce(dist, target) - dist.entropy() * float(beta)


def cp_free(dist: PredictedDistribution, target: int,
            entropy_floor: float = 1e-8) -> Tensor:
    """Parameter-free confidence penalty: ce + 1/entropy, floored near one-hot."""
    bonus = ad.reciprocal(ad.maximum_scalar(dist.entropy(), entropy_floor))
    return ce(dist, target) + bonus


def cp_weight(dist: PredictedDistribution, entropy_floor: float = 1e-8) -> float:
    """Entropy-derived weight 1 + 1/H, target-independent, used as a constant."""
    h = dist.entropy_value()
    return 1.0 + 1.0 / max(h, entropy_floor)


def _face_weight(dist: PredictedDistribution, target: int, config: LossConfig,
                 freq_table: FrequencyTable | None,
                 weight_vec: np.ndarray | None) -> float:
    if config.weight_mode == "pre":
        if weight_vec is None:
            raise UsageError("pre-weight mode needs a weight vector")
        return float(weight_vec[target])
    if freq_table is None:
        raise UsageError("post-weight mode needs a frequency table")
    return post_weight(freq_table, dist.argmax(), target)


def combined(dist: PredictedDistribution, target: int, config: LossConfig,
             freq_table: FrequencyTable | None = None,
             weight_vec: np.ndarray | None = None) -> Tensor:
    """Dispatch a single-step loss according to the configured variant."""
    config.validate()
    if config.variant == "ce":
        return ce(dist, target)
    if config.variant == "cp":
        return cp(dist, target, config.beta)
    if config.variant == "cp_free":
        return cp_free(dist, target, config.entropy_floor)
    w = _face_weight(dist, target, config, freq_table, weight_vec)
    if config.variant == "face":
        return face(dist, target, w)
    if config.variant == "face_cp":
        return face(dist, target, w) - dist.entropy() * float(config.beta)
    # face_cp_free: the entropy weight multiplies the weighted loss
    return face(dist, target, w) * cp_weight(dist, config.entropy_floor)


# -- batched loss -------------------------------------------------------------


def _entropy_values(probs_value: np.ndarray) -> np.ndarray:
    p = probs_value
    logp = np.log(np.maximum(p, 1e-300))
    return -(np.where(p > 0.0, p * logp, 0.0)).sum(axis=1)


def _step_weights(probs_value: np.ndarray, targets: np.ndarray,
                  config: LossConfig, freq_table: FrequencyTable | None,
                  weight_vec: np.ndarray | None) -> np.ndarray:
    """FACE weight per row for one decode step (constants, shape (B,))."""
    if not config.needs_frequency:
        return np.ones(targets.shape[0])
    if config.weight_mode == "pre":
        if weight_vec is None:
            raise UsageError("pre-weight mode needs a weight vector")
        w = weight_vec[targets]
    else:
        if freq_table is None:
            raise UsageError("post-weight mode needs a frequency table")
        picks = np.argmax(probs_value, axis=1)
        w = post_weight_array(freq_table, picks, targets)
    if config.variant == "face_cp_free":
        h = _entropy_values(probs_value)
        w = w * (1.0 + 1.0 / np.maximum(h, config.entropy_floor))
    return w


def batch_loss(step_probs: list[Tensor], targets: np.ndarray, mask: np.ndarray,
               config: LossConfig, freq_table: FrequencyTable | None = None,
               weight_vec: np.ndarray | None = None,
               weights_override: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Mean per-step loss over non-PAD positions, plus the weights applied.

    step_probs holds one (B, N) probability tensor per target position.
    weights_override, when given, replaces the computed FACE weights (used
    for audits and for gradient checks that freeze weights).
    """
    config.validate()
    if len(step_probs) != targets.shape[1]:
        raise UsageError(
            f"{len(step_probs)} probability steps for {targets.shape[1]} target columns"
        )
    n_tokens = float(mask.sum())
    if n_tokens == 0:
        raise UsageError("all-PAD batch has no loss")
    total: Tensor | None = None
    applied = np.zeros_like(mask)
    for t, probs in enumerate(step_probs):
        m_col = mask[:, t:t + 1]
        if m_col.sum() == 0:
            continue
        tgt = targets[:, t]
        live = m_col[:, 0] > 0
        picked = ad.gather_cols(probs, tgt)
        if (picked.value[live] < PROB_FLOOR).any():
            _log_clamp_once()
        ce_col = ad.neg(ad.log(ad.maximum_scalar(picked, PROB_FLOOR)))
        if weights_override is not None:
            w = weights_override[:, t]
        else:
            w = _step_weights(probs.value, tgt, config, freq_table, weight_vec)
        applied[:, t] = w * mask[:, t]
        term = ce_col * Tensor(w.reshape(-1, 1) * m_col)
        step_total = ad.sum_all(term)
        if config.has_entropy_bonus:
            ent = ad.entropy_rows(probs)
            if config.variant == "cp_free":
                bonus = ad.reciprocal(ad.maximum_scalar(ent, config.entropy_floor))
                step_total = step_total + ad.sum_all(bonus * Tensor(m_col))
            else:
                step_total = step_total - ad.sum_all(ent * Tensor(m_col)) * float(config.beta)
        total = step_total if total is None else total + step_total
    assert total is not None
    return total * (1.0 / n_tokens), applied
