"""Decoder-input selection: decay schedules, coin flips, and the
half-timescale index bookkeeping used by the two-stage curriculum.

Conventions fixed here and relied on everywhere else:
  - time positions are 1-based for parity purposes; position 1 is odd
  - the sequence index v for decoder step s (1-based) is v = s + 1, so
    the first replaceable decoder input has v = 2
  - epsilon is the probability of picking the preferred source (ground
    truth, or the intermediate model during the transition stage); with
    probability 1 - epsilon the decoder consumes its own prediction
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import RngState

# exp() overflows float64 just above 709; past this the epsilon value
# underflows to 0 anyway
_MAX_EXPONENT = 700.0


class Strategy(enum.Enum):
    TEACHER_FORCING = "teacher_forcing"
    SCHEDULED_SAMPLING = "scheduled_sampling"
    TPG = "tpg"


class Source(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    OWN_PREDICTION = "own_prediction"
    INTERMEDIATE_MODEL = "intermediate_model"


@dataclass
class ScheduleConfig:
    strategy: Strategy
    lam: float = 100.0
    index_aware: bool = True
    stage1_iters: int = 0
    transition_iters: int = 1

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.transition_iters < 1:
            raise ConfigError(
                f"transition_iters must be positive, got {self.transition_iters}")
        if self.stage1_iters < 0:
            raise ConfigError(
                f"stage1_iters must be non-negative, got {self.stage1_iters}")
        if self.strategy is Strategy.TPG and self.stage1_iters < 1:
            raise ConfigError("tpg requires stage1_iters >= 1")


@dataclass
class SamplingDecision:
    tau: int
    epsilon_used: float
    source: Source


def inverse_sigmoid_epsilon(i: int, lam: float) -> float:
    """lam / (lam + exp(i / lam)), clipped to 0 when exp would overflow."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if i < 0:
        raise ConfigError(f"batch index must be non-negative, got {i}")
    e = i / lam
    if e > _MAX_EXPONENT:
        return 0.0
    return lam / (lam + math.exp(e))


def index_aware_epsilon(i: int, v: int, lam: float) -> float:
    """lam / (lam + exp(i * log(v) / lam)); faster decay the deeper into
    the horizon the step sits."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if i < 0:
        raise ConfigError(f"batch index must be non-negative, got {i}")
    if v < 2:
        raise ConfigError(f"sequence index must be >= 2, got {v}")
    e = i * math.log(v) / lam
    if e > _MAX_EXPONENT:
        return 0.0
    return lam / (lam + math.exp(e))


def epsilon_for(config: ScheduleConfig, i: int, v: int) -> float:
    """Probability of the preferred source at global batch i, sequence
    index v, under the configured strategy."""
    if config.strategy is Strategy.TEACHER_FORCING:
        return 1.0
    if config.strategy is Strategy.SCHEDULED_SAMPLING:
        return inverse_sigmoid_epsilon(i, config.lam)
    # two-stage curriculum: full preference until the transition starts
    if i < config.stage1_iters:
        return 1.0
    j = i - config.stage1_iters
    if config.index_aware:
        return index_aware_epsilon(j, v, config.lam)
    return inverse_sigmoid_epsilon(j, config.lam)


def draw_tau(epsilon: float, rng: RngState,
             preferred: Source = Source.GROUND_TRUTH) -> SamplingDecision:
    """One coin flip: tau=1 (use the preferred source) with probability
    epsilon, else tau=0 (use the model's own prediction)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    tau = int(rng.bernoulli(epsilon, 1)[0])
    return SamplingDecision(
        tau=tau,
        epsilon_used=epsilon,
        source=preferred if tau == 1 else Source.OWN_PREDICTION,
    )


def mix_inputs(tau: int, fallback: np.ndarray, preferred: np.ndarray) -> np.ndarray:
    """Select preferred when tau=1, fallback when tau=0, bit-exactly."""
    if fallback.shape != preferred.shape:
        raise DimensionError(
            f"mix_inputs shapes differ: {list(fallback.shape)} vs "
            f"{list(preferred.shape)}")
    if tau not in (0, 1):
        raise ConfigError(f"tau must be 0 or 1, got {tau}")
    return preferred if tau == 1 else fallback


def subsample_odd_even(seq: np.ndarray):
    """Split along the leading time axis into 1-based odd positions
    (1, 3, 5, ...) and even positions; order preserved."""
    seq = np.asarray(seq)
    if seq.shape[0] < 1:
        raise DimensionError("cannot subsample an empty sequence")
    return seq[0::2], seq[1::2]


def interleave_odd_even(odd: np.ndarray, even: np.ndarray) -> np.ndarray:
    """Inverse of subsample_odd_even."""
    odd = np.asarray(odd)
    even = np.asarray(even)
    n_odd, n_even = odd.shape[0], even.shape[0]
    if n_odd - n_even not in (0, 1):
        raise DimensionError(
            f"cannot interleave lengths {n_odd} (odd) and {n_even} (even)")
    if odd.shape[1:] != even.shape[1:] and n_even > 0:
        raise DimensionError(
            f"interleave trailing shapes differ: {list(odd.shape[1:])} vs "
            f"{list(even.shape[1:])}")
    out = np.empty((n_odd + n_even,) + odd.shape[1:], dtype=odd.dtype)
    out[0::2] = odd
    out[1::2] = even
    return out


def m1_source_index(j: int):
    """Map a 1-based full-timescale target index to the half-timescale
    model's output: (parity, 1-based index within that parity half)."""
    if j < 1:
        raise IndexError(f"target index must be >= 1, got {j}")
    return ("odd" if j % 2 == 1 else "even"), (j + 1) // 2
