# src/workflow/iteration.py
# One RLHF iteration end to end: generation + inference, actor/critic training
# per mini-batch and the switching overheads between stages, in the serial
# (base) and the fused mode.

import math
import logging
from dataclasses import field, asdict, dataclass
from typing import Dict, List, Tuple, Optional

import numpy as np
import pandas as pd

from src.core.specs import CostModel, ModelSpec, ClusterSpec, ParallelStrategy
from src.core.errors import ConfigError, InfeasibleError
from src.core.cost_model import weight_bytes
from src.fusion.layout import FusionLayout, transform_problem
from src.fusion.schedule import (
    check_valid,
    rebind,
    serial_schedule,
    serial_makespan,
)
from src.annealer.anneal import AnnealParams
from src.annealer.search import multi_seed_search
from src.genfuse.lengths import LengthDistribution
from src.genfuse.simulator import InferenceTask, simulate_serial
from src.genfuse.sweep import (
    DEFAULT_GRID,
    GenerationSetup,
    sweep_threshold,
    refine_threshold,
    simulate_at_ratio,
)
from src.workflow.balance import balance_minibatch
from src.workflow.strategy import search_strategy, memory_per_gpu, task_cost

logger = logging.getLogger(__name__)

MODES = ('base', 'fused')


def _same_shape(a: ModelSpec, b: ModelSpec) -> bool:
    shape = ('num_layers', 'num_heads', 'hidden_size', 'intermediate_size', 'vocab_size')
    return all(getattr(a, f) == getattr(b, f) for f in shape)


@dataclass(frozen=True)
class IterationConfig:
    actor: ModelSpec
    critic: ModelSpec
    ref: ModelSpec
    reward: ModelSpec
    actor_train: ParallelStrategy
    critic_train: ParallelStrategy
    lengths: LengthDistribution
    generation_gpus: int = 8
    global_batch: int = 512
    mini_batch: int = 64
    prompt_len: int = 128
    microbatch_size: int = 1
    layer_split: str = 'even'
    switch_setup_seconds: float = 0.02
    weight_swap_seconds: float = 0.0
    anneal: AnnealParams = field(default_factory=AnnealParams)
    num_chains: int = 4
    sweep_grid: Tuple[float, ...] = DEFAULT_GRID
    seed: int = 0

    def __post_init__(self):
        if self.global_batch < 1 or self.mini_batch < 1:
            raise ConfigError("global_batch and mini_batch must be >= 1", code="config.non_positive")
        if self.global_batch % self.mini_batch:
            raise ConfigError(
                f"global_batch {self.global_batch} is not a multiple of mini_batch {self.mini_batch}",
                code="config.minibatch",
            )
        if not _same_shape(self.actor, self.ref):
            raise ConfigError("actor and reference models must share one shape", code="config.model_pair")
        if not _same_shape(self.critic, self.reward):
            raise ConfigError("critic and reward models must share one shape", code="config.model_pair")
        if self.switch_setup_seconds < 0 or self.weight_swap_seconds < 0:
            raise ConfigError("overhead constants must be >= 0", code="config.non_positive")

    @property
    def max_output_len(self) -> int:
        return self.lengths.max_len

    @property
    def num_minibatches(self) -> int:
        return self.global_batch // self.mini_batch

    def generation_setup(self, cluster: ClusterSpec, seed: int = None) -> GenerationSetup:
        return GenerationSetup(
            actor=self.actor,
            inference_tasks=(
                InferenceTask('ref', self.ref),
                InferenceTask('reward', self.reward),
                InferenceTask('critic', self.critic),
            ),
            num_instances=cluster.num_gpus // self.generation_gpus,
            gpus_per_instance=self.generation_gpus,
            global_batch=self.global_batch,
            prompt_len=self.prompt_len,
            lengths=self.lengths,
            seed=self.seed if seed is None else seed,
        )


@dataclass(frozen=True)
class IterationBreakdown:
    gen_plus_inf: float
    train: float
    others: float

    def __post_init__(self):
        if min(self.gen_plus_inf, self.train, self.others) < 0:
            raise ConfigError("breakdown components must be >= 0", code="internal")

    @property
    def total(self) -> float:
        return self.gen_plus_inf + self.train + self.others

    def to_dict(self) -> Dict[str, float]:
        out = asdict(self)
        out['total'] = self.total
        return out


def switch_overhead(config: IterationConfig, cluster: ClusterSpec) -> float:
    """
    Actor weights are redistributed into and out of the generation layout and
    the critic's from its inference layout into training. Every GPU of the
    training layout sends its own shard at the same time, so a move costs one
    shard over the interconnect plus a fixed setup time.
    """
    bw = cluster.interconnect_bandwidth

    def move(spec: ModelSpec, strategy: ParallelStrategy) -> float:
        shard = weight_bytes(spec) / (strategy.tp * strategy.pp)
        return shard / bw + config.switch_setup_seconds

    return (
        2 * move(config.actor, config.actor_train)
        + move(config.critic, config.critic_train)
        + config.weight_swap_seconds
    )


def training_memory(config: IterationConfig, mode: str, cost: CostModel) -> float:
    """
    Bytes per GPU while training at the longest possible sequence. Fused
    training keeps actor and critic on the same GPUs; base training runs them
    one after the other.
    """
    seq_len = config.prompt_len + config.max_output_len
    needs = [
        memory_per_gpu(spec, strategy, 'train', seq_len, config.microbatch_size, cost)
        for spec, strategy in (
            (config.actor, config.actor_train),
            (config.critic, config.critic_train),
        )
    ]
    return sum(needs) if mode == 'fused' else max(needs)


def check_training_memory(
    config: IterationConfig, cluster: ClusterSpec, mode: str, cost: CostModel
) -> float:
    need = training_memory(config, mode, cost)
    if need > cluster.gpu_memory_bytes:
        raise InfeasibleError(
            f"{mode} training needs {need:.3g} bytes per GPU, "
            f"{cluster.gpu_memory_bytes:.3g} available",
            code="strategy.memory",
        )
    return need


def training_seq_lens(config: IterationConfig, lengths: np.ndarray) -> List[int]:
    """Per mini-batch: prompt plus mean output length of the heaviest data-parallel group."""
    out = []
    for i in range(config.num_minibatches):
        chunk = [int(x) for x in lengths[i * config.mini_batch:(i + 1) * config.mini_batch]]
        groups = balance_minibatch(chunk, min(config.actor_train.dp, len(chunk)))
        heaviest = max(groups, key=lambda g: (sum(g), len(g)))
        out.append(config.prompt_len + int(math.ceil(sum(heaviest) / len(heaviest))))
    return out


def training_layout(
    config: IterationConfig, cluster: ClusterSpec, seq_len: int, cost: CostModel
) -> FusionLayout:
    """Actor and critic training fused; the model with the larger tp is model A."""
    pairs = [(config.actor, config.actor_train), (config.critic, config.critic_train)]
    if config.actor_train.tp < config.critic_train.tp:
        pairs.reverse()
    (spec_a, strat_a), (spec_b, strat_b) = pairs
    return transform_problem(
        spec_a,
        strat_a,
        spec_b,
        strat_b,
        global_batch=config.mini_batch,
        microbatch_size=config.microbatch_size,
        cluster=cluster,
        cost=cost,
        seq_len=seq_len,
        layer_split=config.layer_split,
    )


def _train_time(
    config: IterationConfig,
    cluster: ClusterSpec,
    mode: str,
    lengths: np.ndarray,
    cost: CostModel,
    n_jobs: Optional[int],
) -> float:
    layouts: Dict[int, FusionLayout] = {}
    seqs = training_seq_lens(config, lengths)
    for seq in seqs:
        if seq not in layouts:
            layouts[seq] = training_layout(config, cluster, seq, cost)
    if mode == 'base':
        return sum(serial_makespan(layouts[seq]) for seq in seqs)

    # one schedule, searched on the first mini-batch and reused for the rest
    first = layouts[seqs[0]]
    schedule, _ = multi_seed_search(first, config.anneal, config.num_chains, n_jobs=n_jobs)
    total = 0.0
    for seq in seqs:
        layout = layouts[seq]
        bound = rebind(schedule, layout)
        if not check_valid(bound, layout):
            logger.warning("schedule not valid at seq_len %d; using serial order", seq)
            bound = serial_schedule(layout)
        total += bound.energy
    return total


def simulate_iteration(
    config: IterationConfig,
    cluster: ClusterSpec,
    mode: str,
    cost: CostModel = None,
    n_jobs: int = None,
) -> IterationBreakdown:
    """
    Args:
        config: Models, strategies and workload
        cluster: Device pool
        mode: 'base' (serial stages, serial 1F1B training) or 'fused'
        cost: Cost coefficients
        n_jobs: joblib workers for chains and sweep points
    Returns:
        Gen.+Inf., Train and Others seconds
    Raises:
        InfeasibleError: The training strategies overflow GPU memory
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}", code="config.mode")
    cost = cost or CostModel()
    check_training_memory(config, cluster, mode, cost)
    setup = config.generation_setup(cluster)
    lengths = setup.sample()

    if mode == 'base':
        gen_inf = simulate_serial(
            setup.batch(lengths), setup.instances(cluster, cost), setup.inference_tasks, cost
        ).total
    else:
        _, curve = sweep_threshold(setup, cluster, cost, config.sweep_grid, lengths, n_jobs)
        gen_inf = float(curve['total_seconds'].min())

    train = _train_time(config, cluster, mode, lengths, cost, n_jobs)
    breakdown = IterationBreakdown(gen_inf, train, switch_overhead(config, cluster))
    logger.info(
        "%s iteration: gen+inf %.2fs, train %.2fs, others %.2fs",
        mode,
        breakdown.gen_plus_inf,
        breakdown.train,
        breakdown.others,
    )
    return breakdown


def format_breakdown(base: IterationBreakdown, fused: IterationBreakdown) -> str:
    rows = [
        ("Gen.+Inf.", base.gen_plus_inf, fused.gen_plus_inf),
        ("Train", base.train, fused.train),
        ("Others", base.others, fused.others),
        ("Total", base.total, fused.total),
    ]
    lines = [f"{'stage':<10}{'base_s':>14}{'fused_s':>14}{'speedup':>10}"]
    for name, b, f in rows:
        speedup = b / f if f else float('nan')
        lines.append(f"{name:<10}{b:>14.3f}{f:>14.3f}{speedup:>10.3f}")
    return "\n".join(lines) + "\n"


def simulate_iterations(
    config: IterationConfig,
    cluster: ClusterSpec,
    iterations: int,
    resweep_interval: int = None,
    cost: CostModel = None,
    n_jobs: int = None,
) -> pd.DataFrame:
    """
    Generation + inference over several iterations with fresh lengths each
    time. The migration ratio comes from an initial sweep and, when
    resweep_interval is set, is re-swept every resweep_interval iterations over
    the lengths observed so far.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1", code="config.non_positive")
    if resweep_interval is not None and resweep_interval < 1:
        raise ConfigError("resweep_interval must be >= 1", code="config.non_positive")
    cost = cost or CostModel()
    setup = config.generation_setup(cluster)
    ratio, _ = sweep_threshold(setup, cluster, cost, config.sweep_grid, n_jobs=n_jobs)
    observed: List[int] = []
    rows = []
    for i in range(iterations):
        lengths = setup.sample(config.seed + i)
        serial = simulate_serial(
            setup.batch(lengths), setup.instances(cluster, cost), setup.inference_tasks, cost
        )
        fused = simulate_at_ratio(setup, cluster, ratio, cost, lengths)
        observed.extend(int(x) for x in lengths)
        resweep = bool(resweep_interval) and (i + 1) % resweep_interval == 0
        rows.append(
            {
                'iteration': i,
                'ratio': ratio,
                'serial_seconds': serial.total,
                'fused_seconds': fused.total,
                'resweep': resweep,
            }
        )
        if resweep:
            ratio, _ = refine_threshold(setup, cluster, observed, cost, config.sweep_grid, n_jobs)
            logger.info("iteration %d: migration ratio refreshed to %.2f", i, ratio)
    return pd.DataFrame(rows)


STRATEGY_TASKS = (
    ('actor_train', 'actor', 'train'),
    ('critic_train', 'critic', 'train'),
    ('ref_forward', 'ref', 'forward'),
    ('reward_forward', 'reward', 'forward'),
)


def plan_strategies(
    config: IterationConfig, cluster: ClusterSpec, cost: CostModel = None
) -> pd.DataFrame:
    """
    Cheapest (dp, pp, tp) of every RLHF task on the whole cluster, next to the
    configured training strategies. Training is costed on one mini-batch and
    the forward tasks on the global batch, both at the longest sequence.
    """
    cost = cost or CostModel()
    seq_len = config.prompt_len + config.max_output_len
    configured = {'actor_train': config.actor_train, 'critic_train': config.critic_train}
    rows = []
    for name, role, kind in STRATEGY_TASKS:
        spec = getattr(config, role)
        batch = config.mini_batch if kind == 'train' else config.global_batch
        choice = search_strategy(spec, cluster, kind, batch, seq_len, config.microbatch_size, cost)
        row = {
            'task': name,
            'model': spec.name,
            'dp': choice.strategy.dp,
            'pp': choice.strategy.pp,
            'tp': choice.strategy.tp,
            'seconds': choice.cost_seconds,
            'memory_bytes': choice.memory_bytes,
            'configured': None,
            'configured_seconds': None,
        }
        if name in configured:
            strategy = configured[name]
            row['configured'] = f"{strategy.dp}x{strategy.pp}x{strategy.tp}"
            row['configured_seconds'] = task_cost(
                spec, strategy, kind, batch, seq_len, config.microbatch_size, cost
            )
        rows.append(row)
    return pd.DataFrame(rows)
