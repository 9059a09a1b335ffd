# src/fusion/layout.py
# Fusion problem: two pipelines packed onto one set of physical stages, model A
# in forward stage order and model B in reversed stage order.

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple, Optional, Sequence

from src.core.specs import ModelSpec, ClusterSpec, CostModel, ParallelStrategy
from src.core.errors import ConfigError, LayoutError
from src.core.cost_model import (
    vocab_latency,
    estimate_params,
    subtask_latency,
    activation_per_microbatch,
)

logger = logging.getLogger(__name__)

MODELS = ('A', 'B')
LAYER_SPLITS = ('even', 'fractional')


def physical_stage(n1: int, n2: int, model: str, group: int, stage_logical: int) -> int:
    # model B groups are laid out in reversed stage order
    if model == 'A':
        return group * n1 + stage_logical
    return (group + 1) * n2 - 1 - stage_logical


@dataclass(frozen=True, eq=False)
class Subtask:
    """One (model, group, micro-batch, logical stage, direction) unit of work."""

    model: str
    group: int
    microbatch: int
    stage_logical: int
    direction: str
    latency: float
    uid: int
    stage: int

    @property
    def key(self) -> Tuple[str, int, int, int, str]:
        return (self.model, self.group, self.microbatch, self.stage_logical, self.direction)

    @property
    def is_forward(self) -> bool:
        return self.direction == 'fwd'

    def __repr__(self):
        return (
            f"{self.model}{self.group}.{self.direction}(mb={self.microbatch}, "
            f"l={self.stage_logical}, p={self.stage})"
        )


@dataclass(frozen=True)
class Chunk:
    model: str
    group: int
    stage_logical: int


@dataclass(frozen=True, eq=False)
class FusionLayout:
    s: int
    N: int
    N1: int
    N2: int
    K1: int
    K2: int
    M1: int
    M2: int
    placement: Tuple[Tuple[Chunk, ...], ...]
    subtasks: Tuple[Subtask, ...]
    inter_dep: Tuple[Optional[int], ...]
    activation: Tuple[float, ...]
    members: Tuple[Tuple[int, ...], ...]
    capacity: float
    comm: float
    params: Tuple[int, int]
    fwd_latency: Tuple[Tuple[float, ...], Tuple[float, ...]]
    bwd_latency: Tuple[Tuple[float, ...], Tuple[float, ...]]
    names: Tuple[str, str] = ('A', 'B')

    def __post_init__(self):
        object.__setattr__(self, '_by_key', {t.key: t for t in self.subtasks})

    @property
    def by_key(self) -> Dict[tuple, Subtask]:
        return self._by_key

    @property
    def num_subtasks(self) -> int:
        return len(self.subtasks)

    @property
    def has_b(self) -> bool:
        return self.N2 > 0

    def stages_of(self, model: str) -> int:
        return self.N1 if model == 'A' else self.N2

    def microbatches_of(self, model: str) -> int:
        return self.M1 if model == 'A' else self.M2

    def model_index(self, model: str) -> int:
        return MODELS.index(model)

    def physical_stage(self, model: str, group: int, stage_logical: int) -> int:
        return physical_stage(self.N1, self.N2, model, group, stage_logical)

    def total_work(self, stage: int) -> float:
        return sum(self.subtasks[u].latency for u in self.members[stage])

    def describe(self) -> str:
        return (
            f"N={self.N} s={self.s} N1={self.N1} N2={self.N2} K1={self.K1} "
            f"K2={self.K2} M1={self.M1} M2={self.M2} subtasks={self.num_subtasks}"
        )


def _model_subtasks(
    model: str,
    groups: int,
    stages: int,
    microbatches: int,
    fwd: Sequence[float],
    bwd: Sequence[float],
    physical,
    start_uid: int,
) -> List[Subtask]:
    subtasks = []
    uid = start_uid
    for g in range(groups):
        for m in range(microbatches):
            for direction, lat in (('fwd', fwd), ('bwd', bwd)):
                for l in range(stages):
                    subtasks.append(
                        Subtask(model, g, m, l, direction, lat[l], uid, physical(model, g, l))
                    )
                    uid += 1
    return subtasks


def build_layout(
    n1: int,
    n2: int,
    m1: int,
    m2: int,
    fwd_a: Sequence[float],
    bwd_a: Sequence[float],
    fwd_b: Sequence[float] = (),
    bwd_b: Sequence[float] = (),
    act_a: Sequence[float] = None,
    act_b: Sequence[float] = None,
    capacity: float = math.inf,
    comm: float = 0.0,
    params: Tuple[int, int] = (2, 1),
    s: int = 1,
    names: Tuple[str, str] = ('A', 'B'),
) -> FusionLayout:
    """
    Assemble a layout from per-logical-stage latencies.

    Model A runs n1-stage pipelines, model B n2-stage pipelines (n2 = 0 for a
    single-model layout). The fused unit spans lcm(n1, n2) physical stages and
    hosts K1 = N/n1 groups of A and K2 = N/n2 groups of B.
    """
    if n1 < 1 or m1 < 1:
        raise LayoutError("model A needs at least one stage and one micro-batch")
    if n2 < 0 or (n2 > 0 and m2 < 1):
        raise LayoutError("model B needs at least one micro-batch when present")
    if len(fwd_a) != n1 or len(bwd_a) != n1 or len(fwd_b) != n2 or len(bwd_b) != n2:
        raise ConfigError("latency arrays do not match the stage counts", code="config.latency_shape")
    for value in list(fwd_a) + list(bwd_a) + list(fwd_b) + list(bwd_b):
        if value <= 0:
            raise ConfigError(f"subtask latency must be positive, got {value}", code="config.non_positive")
    act_a = tuple(act_a) if act_a is not None else (1,) * n1
    act_b = tuple(act_b) if act_b is not None else (1,) * n2

    if n2:
        N = n1 * n2 // math.gcd(n1, n2)
        K1, K2 = N // n1, N // n2
        if K1 * m1 != K2 * m2:
            raise LayoutError(
                f"K1*M1 = {K1 * m1} differs from K2*M2 = {K2 * m2}",
                code="layout.batch_mismatch",
            )
    else:
        N, K1, K2, m2 = n1, 1, 0, 0

    def physical(model, group, logical):
        return physical_stage(n1, n2, model, group, logical)

    subtasks = _model_subtasks('A', K1, n1, m1, fwd_a, bwd_a, physical, 0)
    if n2:
        subtasks += _model_subtasks('B', K2, n2, m2, fwd_b, bwd_b, physical, len(subtasks))

    by_key = {t.key: t for t in subtasks}
    inter_dep = []
    activation = []
    for t in subtasks:
        stages = n1 if t.model == 'A' else n2
        if t.direction == 'fwd':
            dep = (t.model, t.group, t.microbatch, t.stage_logical - 1, 'fwd')
            dep = dep if t.stage_logical > 0 else None
        elif t.stage_logical == stages - 1:
            dep = (t.model, t.group, t.microbatch, t.stage_logical, 'fwd')
        else:
            dep = (t.model, t.group, t.microbatch, t.stage_logical + 1, 'bwd')
        inter_dep.append(by_key[dep].uid if dep else None)
        activation.append((act_a if t.model == 'A' else act_b)[t.stage_logical])

    members = [[] for _ in range(N)]
    for t in subtasks:
        members[t.stage].append(t.uid)
    placement = []
    for p in range(N):
        chunks = [Chunk('A', p // n1, p % n1)]
        if n2:
            j = p // n2
            chunks.append(Chunk('B', j, (j + 1) * n2 - 1 - p))
        placement.append(tuple(chunks))

    layout = FusionLayout(
        s=s,
        N=N,
        N1=n1,
        N2=n2,
        K1=K1,
        K2=K2,
        M1=m1,
        M2=m2,
        placement=tuple(placement),
        subtasks=tuple(subtasks),
        inter_dep=tuple(inter_dep),
        activation=tuple(activation),
        members=tuple(tuple(row) for row in members),
        capacity=capacity,
        comm=comm,
        params=tuple(params),
        fwd_latency=(tuple(fwd_a), tuple(fwd_b)),
        bwd_latency=(tuple(bwd_a), tuple(bwd_b)),
        names=tuple(names),
    )
    logger.debug("built layout %s", layout.describe())
    return layout


def _layers_per_stage(spec: ModelSpec, stages: int, layer_split: str) -> float:
    if layer_split not in LAYER_SPLITS:
        raise ConfigError(f"unknown layer_split {layer_split!r}", code="config.layer_split")
    if spec.num_layers % stages == 0:
        return spec.num_layers // stages
    if layer_split == 'even':
        raise LayoutError(
            f"{spec.name}: {spec.num_layers} layers do not divide into {stages} stages "
            f"(use layer_split='fractional')",
            code="layout.layers_not_divisible",
        )
    return spec.num_layers / stages


def transform_problem(
    spec_a: ModelSpec,
    strat_a: ParallelStrategy,
    spec_b: Optional[ModelSpec],
    strat_b: Optional[ParallelStrategy],
    global_batch: int,
    microbatch_size: int,
    cluster: ClusterSpec,
    cost: CostModel = None,
    seq_len: int = 1024,
    layer_split: str = 'even',
    comm: float = 0.0,
) -> FusionLayout:
    """
    Build the fusion problem for two models sharing one device pool.

    Model A must have the larger (or equal) tensor-parallel degree; every
    s = tp_a / tp_b consecutive stages of model B are merged into one physical
    stage of tp_a GPUs.

    Args:
        spec_a, strat_a: Model A and its strategy
        spec_b, strat_b: Model B and its strategy, or None for a single model
        global_batch: Samples per training step
        microbatch_size: Samples per micro-batch
        cluster: Device pool, provides the stage activation capacity
        cost: Cost coefficients
        seq_len: Tokens per sample
        layer_split: 'even' or 'fractional'
        comm: Communication time on each stage boundary
    Returns:
        FusionLayout with latencies in seconds and activations in bytes
    """
    cost = cost or CostModel()
    if global_batch < 1 or microbatch_size < 1:
        raise ConfigError("global_batch and microbatch_size must be >= 1")
    strat_a.check_pool(cluster.num_gpus)

    def batch_split(strategy: ParallelStrategy, name: str) -> int:
        per_pipeline = strategy.dp * microbatch_size
        if global_batch % per_pipeline:
            raise LayoutError(
                f"{name}: global batch {global_batch} not divisible into "
                f"dp={strategy.dp} x micro-batch {microbatch_size}",
                code="layout.batch_not_divisible",
            )
        return global_batch // per_pipeline

    def stage_costs(spec, strategy, stages, gpus):
        layers = _layers_per_stage(spec, strategy.pp, layer_split) * (strategy.pp // stages)
        fwd = subtask_latency(spec, layers, seq_len, microbatch_size, 'fwd', cost) / gpus
        bwd = subtask_latency(spec, layers, seq_len, microbatch_size, 'bwd', cost) / gpus
        act = activation_per_microbatch(spec, layers, seq_len, microbatch_size, cost)
        fwds, bwds = [fwd] * stages, [bwd] * stages
        if cost.include_embedding_latency:
            # input embedding on the first stage, output head on the last
            for p in (0, stages - 1):
                fwds[p] += vocab_latency(spec, seq_len, microbatch_size, 'fwd', cost) / gpus
                bwds[p] += vocab_latency(spec, seq_len, microbatch_size, 'bwd', cost) / gpus
        return fwds, bwds, [act] * stages

    m1 = batch_split(strat_a, spec_a.name)
    fwd_a, bwd_a, act_a = stage_costs(spec_a, strat_a, strat_a.pp, strat_a.tp)
    if spec_b is None:
        layout = build_layout(
            strat_a.pp, 0, m1, 0, fwd_a, bwd_a,
            act_a=act_a,
            capacity=cluster.activation_capacity_per_stage,
            comm=comm,
            params=(estimate_params(spec_a), 0),
            names=(spec_a.name, ''),
        )
        logger.info("single-model layout %s", layout.describe())
        return layout

    strat_b.check_pool(cluster.num_gpus)
    if strat_a.tp < strat_b.tp:
        raise LayoutError(
            f"model A ({spec_a.name}) must have tp >= model B ({spec_b.name}), "
            f"got {strat_a.tp} < {strat_b.tp}; swap the models",
            code="layout.tp_order",
        )
    s = strat_a.tp // strat_b.tp
    if strat_b.pp % s:
        raise LayoutError(
            f"pp of {spec_b.name} ({strat_b.pp}) not divisible by tp ratio s={s}",
            code="layout.pp_not_divisible",
        )
    n2 = strat_b.pp // s
    m2 = batch_split(strat_b, spec_b.name)
    fwd_b, bwd_b, act_b = stage_costs(spec_b, strat_b, n2, strat_a.tp)
    N = strat_a.pp * n2 // math.gcd(strat_a.pp, n2)
    K1 = N // strat_a.pp
    if strat_a.dp % K1:
        raise LayoutError(
            f"dp of {spec_a.name} ({strat_a.dp}) cannot host K1={K1} groups per unit",
            code="layout.dp_not_divisible",
        )
    layout = build_layout(
        strat_a.pp, n2, m1, m2, fwd_a, bwd_a, fwd_b, bwd_b,
        act_a=act_a,
        act_b=act_b,
        capacity=cluster.activation_capacity_per_stage,
        comm=comm,
        params=(estimate_params(spec_a), estimate_params(spec_b)),
        s=s,
        names=(spec_a.name, spec_b.name),
    )
    logger.info("fusion layout %s (%s + %s)", layout.describe(), spec_a.name, spec_b.name)
    return layout
