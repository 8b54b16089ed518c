"""
Seeded synthetic expert-popularity traces.

Latent log-weights start from N(0, initial_spread^2) and follow a Gaussian
random walk with step N(0, volatility^2). Each iteration's counts are a
multinomial draw of tokens_per_batch over softmax(latent), sampled as
sequential conditional binomials so a seed yields the same trace on every
platform. Spiky traces additionally swap the largest latent weight with a
uniformly chosen one with probability spike_probability per iteration.

The RNG is numpy's PCG64 bit generator.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import List

import numpy as np
from django.conf import settings

from cluster.exceptions import InvalidConfig
from cluster.types import Trace

logger = logging.getLogger(__name__)


class TraceMode(str, Enum):
    WALK = 'walk'
    SPIKY = 'spiky'
    UNIFORM = 'uniform'


@dataclass(frozen=True)
class TraceGenConfig:
    experts: int
    iterations: int
    tokens_per_batch: int
    mode: TraceMode = TraceMode.WALK
    volatility: float = 0.05
    spike_probability: float = 0.05
    seed: int = 0
    initial_spread: float = 1.5

    @classmethod
    def with_defaults(cls, experts: int, iterations: int, mode='walk', **overrides) -> 'TraceGenConfig':
        """Config whose unspecified knobs come from the TRACEGEN_DEFAULT_* settings"""
        values = {
            'tokens_per_batch': settings.TRACEGEN_DEFAULT_TOKENS_PER_BATCH,
            'volatility': settings.TRACEGEN_DEFAULT_VOLATILITY,
            'spike_probability': settings.TRACEGEN_DEFAULT_SPIKE_PROBABILITY,
            'seed': settings.TRACEGEN_DEFAULT_SEED,
            'initial_spread': settings.TRACEGEN_DEFAULT_INITIAL_SPREAD,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            mode = TraceMode(mode)
        except ValueError:
            raise InvalidConfig(f"mode must be one of walk, spiky, uniform; got {mode!r}")
        return cls(experts=experts, iterations=iterations, mode=mode, **values)

    def to_dict(self):
        return {
            'experts': self.experts,
            'iterations': self.iterations,
            'tokens_per_batch': self.tokens_per_batch,
            'mode': self.mode.value,
            'volatility': self.volatility,
            'spike_probability': self.spike_probability,
            'seed': self.seed,
            'initial_spread': self.initial_spread,
        }


def validate_config(config: TraceGenConfig) -> TraceGenConfig:
    try:
        mode = TraceMode(config.mode)
    except ValueError:
        raise InvalidConfig(f"mode must be one of walk, spiky, uniform; got {config.mode!r}")
    checks = [
        (config.experts >= 1, 'experts >= 1'),
        (config.iterations >= 1, 'iterations >= 1'),
        (config.tokens_per_batch >= 0, 'tokens_per_batch >= 0'),
        (config.volatility >= 0, 'volatility >= 0'),
        (0 <= config.spike_probability <= 1, 'spike_probability in [0, 1]'),
        (config.initial_spread >= 0, 'initial_spread >= 0'),
        (config.seed >= 0, 'seed >= 0'),
    ]
    for holds, invariant in checks:
        if not holds:
            raise InvalidConfig(f"violated invariant: {invariant}")
    return replace(config, mode=mode)


def multinomial_counts(rng: np.random.Generator, tokens: int, probabilities: np.ndarray) -> List[int]:
    """Multinomial draw as a chain of conditional binomials; always sums to `tokens`"""
    counts = []
    remaining = tokens
    mass = 1.0
    for p in probabilities[:-1]:
        if remaining == 0 or mass <= 0:
            counts.append(0)
            continue
        q = min(1.0, max(0.0, float(p) / mass))
        drawn = int(rng.binomial(remaining, q))
        counts.append(drawn)
        remaining -= drawn
        mass -= float(p)
    counts.append(remaining)
    return counts


def _softmax(latent: np.ndarray) -> np.ndarray:
    weights = np.exp(latent - latent.max())
    return weights / weights.sum()


def generate(config: TraceGenConfig) -> Trace:
    config = validate_config(config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    E = config.experts

    if config.mode == TraceMode.UNIFORM:
        latent = np.zeros(E)
    else:
        latent = rng.normal(0.0, config.initial_spread, E)

    rows = []
    spikes = 0
    for t in range(config.iterations):
        if t > 0 and config.mode != TraceMode.UNIFORM:
            latent = latent + rng.normal(0.0, config.volatility, E)
            if config.mode == TraceMode.SPIKY and rng.random() < config.spike_probability:
                top = int(np.argmax(latent))
                other = int(rng.integers(E))
                latent[top], latent[other] = latent[other], latent[top]
                spikes += 1
        rows.append(multinomial_counts(rng, config.tokens_per_batch, _softmax(latent)))

    logger.info(
        f"Generated {config.mode.value} trace: E={E}, T={config.iterations}, seed={config.seed}, spikes={spikes}"
    )
    return Trace.from_counts(rows, tokens_per_batch=config.tokens_per_batch, expert_classes=E)


def max_flip_ratio(trace: Trace, window: int = 3) -> float:
    """
    Largest count ratio any expert shows between two iterations at most
    `window` apart; zero counts are floored to 1.
    """
    best = 1.0
    for i in range(trace.expert_classes):
        series = [max(1, row.counts[i]) for row in trace.rows]
        for t in range(len(series)):
            for u in range(t + 1, min(len(series), t + window + 1)):
                ratio = max(series[t], series[u]) / min(series[t], series[u])
                best = max(best, ratio)
    return best


def lag1_autocorrelation(trace: Trace) -> List[float]:
    """Per-expert lag-1 Pearson correlation of the count series (nan for constant series)"""
    data = np.array([row.counts for row in trace.rows], dtype=np.float64)
    correlations = []
    for i in range(trace.expert_classes):
        a, b = data[:-1, i], data[1:, i]
        if a.std() == 0 or b.std() == 0:
            correlations.append(float('nan'))
        else:
            correlations.append(float(np.corrcoef(a, b)[0, 1]))
    return correlations
