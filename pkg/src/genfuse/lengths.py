# src/genfuse/lengths.py
# Output-length distributions: a lognormal long tail fitted to (median,
# P99.9/median) and an empirical distribution replayed from a length file.

import math
import logging
from pathlib import Path
from dataclasses import dataclass
from typing import Tuple, Iterable, Optional

import numpy as np
from scipy import stats

from src.core.errors import ConfigError

logger = logging.getLogger(__name__)

KINDS = ('lognormal', 'empirical')


@dataclass(frozen=True)
class LengthDistribution:
    kind: str = 'lognormal'
    median: float = 200
    p999_ratio: float = 10.0
    max_len: int = 2048
    values: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown length distribution {self.kind!r}", code="config.lengths")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1", code="config.lengths")
        if self.kind == 'lognormal':
            if self.median < 1:
                raise ConfigError("median must be >= 1", code="config.lengths")
            if self.p999_ratio <= 1:
                raise ConfigError("p999_ratio must be > 1", code="config.lengths")
        elif not self.values:
            raise ConfigError("empirical distribution needs at least one length", code="config.lengths")

    @property
    def sigma(self) -> float:
        """Log-space deviation that puts the 0.999 quantile at p999_ratio * median."""
        return math.log(self.p999_ratio) / stats.norm.ppf(0.999)

    def frozen(self):
        return stats.lognorm(s=self.sigma, scale=self.median)


def load_lengths(path: str) -> Tuple[int, ...]:
    """Read one positive integer token count per line; blank lines are skipped."""
    lengths = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            value = int(line)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: not an integer: {line!r}", code="config.lengths") from exc
        if value < 1:
            raise ConfigError(f"{path}:{lineno}: length must be >= 1", code="config.lengths")
        lengths.append(value)
    if not lengths:
        raise ConfigError(f"{path}: no lengths", code="config.lengths")
    return tuple(lengths)


def empirical(values: Iterable[int], max_len: int) -> LengthDistribution:
    return LengthDistribution(kind='empirical', max_len=max_len, values=tuple(int(v) for v in values))


def sample_lengths(dist: LengthDistribution, n: int, seed: int) -> np.ndarray:
    """
    Args:
        dist: Length distribution
        n: Number of samples
        seed: RNG seed
    Returns:
        Integer token counts in [1, max_len]
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}", code="config.non_positive")
    rng = np.random.default_rng(seed)
    if dist.kind == 'lognormal':
        raw = dist.frozen().rvs(size=n, random_state=rng)
    else:
        pool = np.asarray(dist.values)
        order = rng.permutation(len(pool))
        raw = np.resize(pool[order], n)
    lengths = np.clip(np.rint(raw), 1, dist.max_len).astype(np.int64)
    logger.debug("sampled %d lengths, median %.1f max %d", n, np.median(lengths), lengths.max())
    return lengths
