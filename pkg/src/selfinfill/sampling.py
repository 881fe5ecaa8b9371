"""Token selection: greedy and temperature/nucleus sampling, with forcing.

All randomness flows through named counter-based streams (numpy Philox keyed
by (seed, sample_index)), so parallel samples draw from independent streams
and any single stream replays deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .backends import NextTokenDistribution
from .errors import InvalidInputError

GREEDY = "greedy"
SAMPLE = "sample"


@dataclass(frozen=True)
class SamplerConfig:
    """How to turn a distribution into a token.

    greedy mode ignores temperature, top_p and seed; sample mode scales
    probabilities by 1/temperature (on log-probabilities), truncates to the
    top_p nucleus and draws.
    """

    mode: str = GREEDY
    temperature: float = 0.8
    top_p: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (GREEDY, SAMPLE):
            raise InvalidInputError(f"mode must be {GREEDY!r} or {SAMPLE!r}, got {self.mode!r}")
        if self.temperature <= 0:
            raise InvalidInputError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise InvalidInputError(f"top_p must be in (0, 1], got {self.top_p}")


def rng_stream(seed: int, sample_index: int = 0) -> np.random.Generator:
    """Independent counter-based stream for one (seed, sample index) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, sample_index))))


def max_probability(dist: NextTokenDistribution) -> float:
    """Largest entry of the distribution (the interruption heuristic reads this)."""
    return float(kernels.max_prob(dist.probs))


def apply_force(dist: NextTokenDistribution, forced_token: int) -> NextTokenDistribution:
    """Point mass on the forced token; any downstream selection returns it."""
    if not 0 <= forced_token < dist.size:
        raise InvalidInputError(f"forced token {forced_token} out of range [0, {dist.size})")
    probs = np.zeros(dist.size, dtype=np.float64)
    probs[forced_token] = 1.0
    return NextTokenDistribution.validated(probs)


def select_token(
    dist: NextTokenDistribution,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> int:
    """Choose one token id from the distribution under the config.

    Greedy returns the lowest-index argmax. Sample mode draws one uniform
    variate from the stream and delegates to the nucleus kernel; nucleus
    ordering breaks probability ties by ascending token id.
    """
    if kernels.max_prob(dist.probs) <= 0.0:
        raise InvalidInputError("cannot select from an all-zero distribution")
    if cfg.mode == GREEDY:
        return int(kernels.greedy_pick(dist.probs))
    if rng is None:
        raise InvalidInputError("sample mode requires an rng stream")
    u = float(rng.random())
    return int(kernels.sample_pick(dist.probs, cfg.temperature, cfg.top_p, u))
