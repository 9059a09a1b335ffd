# src/workflow/strategy.py
# Brute-force (dp, pp, tp) search for one RLHF task under a simple memory model.

import logging
from dataclasses import dataclass
from typing import List, Optional

from src.core.specs import CostModel, ModelSpec, ClusterSpec, ParallelStrategy
from src.core.errors import ConfigError, InfeasibleError
from src.core.cost_model import (
    subtask_latency,
    estimate_params,
    activation_per_microbatch,
)
from src.pipeline.baseline import makespan_1f1b

logger = logging.getLogger(__name__)

TASK_KINDS = ('train', 'forward')
TP_DEGREES = (1, 2, 4, 8)
# weights, gradients and fp32 optimizer state per parameter when training
TRAIN_BYTES_PER_PARAM = 16
FORWARD_BYTES_PER_PARAM = 2


@dataclass(frozen=True)
class StrategyChoice:
    strategy: ParallelStrategy
    cost_seconds: float
    memory_bytes: float


def _candidates(spec: ModelSpec, cluster: ClusterSpec) -> List[ParallelStrategy]:
    out = []
    for tp in TP_DEGREES:
        if tp > cluster.gpus_per_node or cluster.num_gpus % tp:
            continue
        for pp in range(1, spec.num_layers + 1):
            if spec.num_layers % pp or cluster.num_gpus % (tp * pp):
                continue
            out.append(ParallelStrategy(cluster.num_gpus // (tp * pp), pp, tp))
    return out


def memory_per_gpu(
    spec: ModelSpec,
    strategy: ParallelStrategy,
    task_kind: str,
    seq_len: int,
    microbatch_size: int,
    cost: CostModel,
) -> float:
    """Parameter state plus the activations a first stage holds under 1F1B."""
    shards = strategy.tp * strategy.pp
    per_param = TRAIN_BYTES_PER_PARAM if task_kind == 'train' else FORWARD_BYTES_PER_PARAM
    weights = estimate_params(spec) * per_param / shards
    layers = spec.num_layers // strategy.pp
    act = activation_per_microbatch(spec, layers, seq_len, microbatch_size, cost) / strategy.tp
    in_flight = strategy.pp if task_kind == 'train' else 1
    return weights + in_flight * act


def task_cost(
    spec: ModelSpec,
    strategy: ParallelStrategy,
    task_kind: str,
    global_batch: int,
    seq_len: int,
    microbatch_size: int,
    cost: CostModel,
) -> float:
    """
    Seconds for one pass over the global batch: 1F1B for training (gradient
    all-reduce overlaps the backward pass), a forward-only pipeline otherwise.
    """
    M = global_batch // (strategy.dp * microbatch_size)
    layers = spec.num_layers // strategy.pp
    fwd = subtask_latency(spec, layers, seq_len, microbatch_size, 'fwd', cost) / strategy.tp
    if task_kind == 'forward':
        return (M + strategy.pp - 1) * fwd
    bwd = fwd * cost.backward_forward_ratio
    return makespan_1f1b(strategy.pp, M, [fwd] * strategy.pp, [bwd] * strategy.pp)


def search_strategy(
    spec: ModelSpec,
    cluster: ClusterSpec,
    task_kind: str,
    global_batch: int = 512,
    seq_len: int = 1024,
    microbatch_size: int = 1,
    cost: CostModel = None,
) -> StrategyChoice:
    """
    Enumerate tp in {1, 2, 4, 8} (at most one node), pp dividing the layer
    count and dp filling the cluster; drop candidates over the GPU memory or
    unable to split the batch, and return the cheapest (ties to smaller pp,
    then smaller tp).
    """
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}", code="config.task_kind")
    cost = cost or CostModel()
    best: Optional[StrategyChoice] = None
    best_key = None
    for strategy in _candidates(spec, cluster):
        if global_batch % (strategy.dp * microbatch_size):
            continue
        memory = memory_per_gpu(spec, strategy, task_kind, seq_len, microbatch_size, cost)
        if memory > cluster.gpu_memory_bytes:
            continue
        seconds = task_cost(
            spec, strategy, task_kind, global_batch, seq_len, microbatch_size, cost
        )
        key = (seconds, strategy.pp, strategy.tp)
        logger.debug("%s %s: %.4fs, %.3g bytes", spec.name, strategy, seconds, memory)
        if best_key is None or key < best_key:
            best, best_key = StrategyChoice(strategy, seconds, memory), key
    if best is None:
        raise InfeasibleError(
            f"no {task_kind} strategy for {spec.name} fits {cluster.num_gpus} GPUs "
            f"of {cluster.gpu_memory_bytes:.3g} bytes",
            code="strategy.infeasible",
        )
    logger.info(
        "%s %s: dp=%d pp=%d tp=%d, %.4fs",
        spec.name,
        task_kind,
        best.strategy.dp,
        best.strategy.pp,
        best.strategy.tp,
        best.cost_seconds,
    )
    return best
