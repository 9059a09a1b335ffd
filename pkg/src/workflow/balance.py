# src/workflow/balance.py
# Spread a mini-batch over data-parallel groups by sequence length.

import heapq
from typing import List, Tuple, Sequence

from src.core.errors import ConfigError


def balance_minibatch(lengths: Sequence[int], dp: int) -> List[Tuple[int, ...]]:
    """
    Longest-processing-time packing: samples in decreasing length go to the
    currently lightest group (ties to the lower group index).

    Args:
        lengths: Sequence length of each sample
        dp: Number of data-parallel groups
    Returns:
        dp groups of lengths, in group order
    """
    if dp < 1:
        raise ConfigError(f"dp must be >= 1, got {dp}", code="config.non_positive")
    if len(lengths) < dp:
        raise ConfigError(
            f"{len(lengths)} samples cannot fill {dp} data-parallel groups",
            code="config.minibatch_too_small",
        )
    heap = [(0, g) for g in range(dp)]
    groups: List[List[int]] = [[] for _ in range(dp)]
    for length in sorted(lengths, reverse=True):
        load, g = heapq.heappop(heap)
        groups[g].append(length)
        heapq.heappush(heap, (load + length, g))
    return [tuple(g) for g in groups]


def round_robin(lengths: Sequence[int], dp: int) -> List[Tuple[int, ...]]:
    return [tuple(lengths[g::dp]) for g in range(dp)]


def load_ratio(groups: Sequence[Sequence[int]]) -> float:
    loads = [sum(g) for g in groups]
    return max(loads) / min(loads) if min(loads) else float('inf')
