# src/genfuse/sweep.py
# Migration-threshold sweep: simulate every candidate R_t and keep the fastest.

import logging
from dataclasses import replace, dataclass
from typing import Any, Dict, List, Tuple, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.core.specs import CostModel, ModelSpec, ClusterSpec
from src.core.errors import ConfigError
from src.core.cost_model import kv_bytes
from src.genfuse.cluster import GenSample, GenInstance
from src.genfuse.lengths import LengthDistribution, empirical, sample_lengths
from src.genfuse.simulator import (
    InferenceTask,
    GenerationResult,
    make_batch,
    simulate_fused,
    make_instances,
    simulate_serial,
)
from src.annealer.search import default_n_jobs

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass(frozen=True)
class GenerationSetup:
    """Everything a generation + inference simulation needs besides the cluster."""

    actor: ModelSpec
    inference_tasks: Tuple[InferenceTask, ...]
    num_instances: int
    gpus_per_instance: int
    global_batch: int
    prompt_len: int
    lengths: LengthDistribution
    seed: int = 0

    def __post_init__(self):
        if self.global_batch < 1 or self.num_instances < 1 or self.gpus_per_instance < 1:
            raise ConfigError(
                "global_batch, num_instances and gpus_per_instance must be >= 1",
                code="config.non_positive",
            )
        if self.prompt_len < 0:
            raise ConfigError("prompt_len must be >= 0", code="config.non_positive")

    @property
    def kv_per_sample_max(self) -> float:
        return kv_bytes(self.actor, self.prompt_len + self.lengths.max_len)

    def sample(self, seed: int = None) -> np.ndarray:
        return sample_lengths(self.lengths, self.global_batch, self.seed if seed is None else seed)

    def batch(self, lengths: Sequence[int] = None) -> List[GenSample]:
        lengths = self.sample() if lengths is None else lengths
        return make_batch(lengths, self.prompt_len, self.actor)

    def instances(self, cluster: ClusterSpec, cost: CostModel) -> List[GenInstance]:
        return make_instances(self.num_instances, cluster, cost, self.actor, self.gpus_per_instance)


def threshold_samples(ratio: float, global_batch: int) -> int:
    return max(1, int(round(ratio * global_batch))) if ratio > 0 else 0


def _row(ratio: float, r_t: int, result: GenerationResult) -> Dict[str, Any]:
    plan = result.plan
    return {
        'ratio': ratio,
        'r_t': r_t,
        'total_seconds': result.total,
        'generation_end_seconds': result.generation_end,
        'inference_end_seconds': result.inference_end,
        'overhead_seconds': result.overhead,
        'm': plan.m if plan else 0,
        'mechanism': plan.mechanism if plan and not plan.noop else 'none',
        'preserved': result.preserved,
    }


def _sweep_point(
    ratio: float,
    batch: List[GenSample],
    instances: List[GenInstance],
    tasks: Tuple[InferenceTask, ...],
    cluster: ClusterSpec,
    cost: CostModel,
    kv_max: float,
) -> Dict[str, Any]:
    r_t = threshold_samples(ratio, len(batch))
    result = simulate_fused(batch, instances, tasks, r_t, cluster, cost, kv_max)
    return _row(ratio, r_t, result)


def sweep_threshold(
    setup: GenerationSetup,
    cluster: ClusterSpec,
    cost: CostModel = None,
    grid: Sequence[float] = DEFAULT_GRID,
    lengths: Sequence[int] = None,
    n_jobs: int = None,
) -> Tuple[float, pd.DataFrame]:
    """
    Simulate every migration ratio of `grid` plus ratio 0 (serial).

    Args:
        setup: Model, instances, batch and length distribution
        cluster: Cluster description
        cost: Cost coefficients
        grid: Migration ratios in (0, 1]
        lengths: Output lengths to use instead of sampling the distribution
        n_jobs: joblib workers for grid points
    Returns:
        Best ratio (ties to the smaller ratio) and the curve, one row per ratio
    """
    grid = sorted(set(float(r) for r in grid))
    if not grid:
        raise ConfigError("sweep grid must not be empty", code="config.grid")
    if any(not 0 < r <= 1 for r in grid):
        raise ConfigError(f"sweep ratios must lie in (0, 1], got {grid}", code="config.grid")
    cost = cost or CostModel()
    batch = setup.batch(lengths)
    instances = setup.instances(cluster, cost)
    tasks = tuple(setup.inference_tasks)

    serial = simulate_serial(batch, instances, tasks, cost)
    rows = [_row(0.0, 0, serial)]
    rows += Parallel(n_jobs=n_jobs or default_n_jobs())(
        delayed(_sweep_point)(r, batch, instances, tasks, cluster, cost, setup.kv_per_sample_max)
        for r in grid
    )
    curve = pd.DataFrame(rows)
    curve['speedup'] = serial.total / curve['total_seconds']
    best = float(curve.loc[curve['total_seconds'].idxmin(), 'ratio'])
    logger.info(
        "sweep: serial %.3fs, best ratio %.2f at %.3fs",
        serial.total,
        best,
        curve['total_seconds'].min(),
    )
    return best, curve


def refine_threshold(
    setup: GenerationSetup,
    cluster: ClusterSpec,
    observed: Sequence[int],
    cost: CostModel = None,
    grid: Sequence[float] = DEFAULT_GRID,
    n_jobs: int = None,
) -> Tuple[float, pd.DataFrame]:
    """Re-sweep with the length distribution replaced by the observed lengths."""
    if len(observed) == 0:
        raise ConfigError("no observed lengths to refine with", code="config.lengths")
    refreshed = replace(setup, lengths=empirical(observed, setup.lengths.max_len))
    return sweep_threshold(refreshed, cluster, cost, grid, n_jobs=n_jobs)


def simulate_at_ratio(
    setup: GenerationSetup,
    cluster: ClusterSpec,
    ratio: float,
    cost: CostModel = None,
    lengths: Optional[Sequence[int]] = None,
) -> GenerationResult:
    cost = cost or CostModel()
    batch = setup.batch(lengths)
    instances = setup.instances(cluster, cost)
    r_t = threshold_samples(ratio, len(batch))
    return simulate_fused(
        batch, instances, setup.inference_tasks, r_t, cluster, cost, setup.kv_per_sample_max
    )
