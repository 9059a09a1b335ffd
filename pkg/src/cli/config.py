# src/cli/config.py
# YAML run configuration: parsing, unit-suffixed keys, model references and
# environment overrides.

import os
import logging
from pathlib import Path
from dataclasses import field, replace, dataclass
from typing import Any, Dict, Tuple, Mapping, Optional

import yaml

from src.core.specs import LLAMA, CostModel, ModelSpec, ClusterSpec, ParallelStrategy
from src.core.errors import ConfigError
from src.annealer.anneal import AnnealParams
from src.genfuse.lengths import LengthDistribution, load_lengths
from src.genfuse.simulator import InferenceTask
from src.genfuse.sweep import DEFAULT_GRID, GenerationSetup
from src.workflow.iteration import IterationConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = 'output'


def env_config_path() -> Optional[str]:
    return os.getenv('FUSEPLAN_CONFIG')


def output_dir(value: str = None) -> Path:
    return Path(value or os.getenv('FUSEPLAN_OUTPUT_DIR', DEFAULT_OUTPUT_DIR))


@dataclass(frozen=True)
class ScheduleProblem:
    model_a: ModelSpec
    strategy_a: ParallelStrategy
    model_b: Optional[ModelSpec]
    strategy_b: Optional[ParallelStrategy]
    global_batch: int
    microbatch_size: int = 1
    seq_len: int = 1024
    layer_split: str = 'even'
    comm: float = 0.0


@dataclass(frozen=True)
class BaselineProblem:
    stages: int
    microbatches: int
    chunks: int = 1
    fwd: float = 1.0
    bwd: float = 2.0
    comm: float = 0.0


@dataclass(frozen=True)
class GaeCheck:
    instances: int = 1000
    max_horizon: int = 4096
    gamma: float = 0.99
    lam: float = 0.95
    seed: int = 0
    tolerance: float = 1e-10


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    cost: CostModel = field(default_factory=CostModel)
    models: Mapping[str, ModelSpec] = field(default_factory=dict)
    anneal: AnnealParams = field(default_factory=AnnealParams)
    num_chains: int = 1
    schedule: Optional[ScheduleProblem] = None
    generation: Optional[GenerationSetup] = None
    sweep_grid: Tuple[float, ...] = DEFAULT_GRID
    iteration: Optional[IterationConfig] = None
    baselines: Optional[BaselineProblem] = None
    gae: GaeCheck = field(default_factory=GaeCheck)
    source: str = ''

    def require(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise ConfigError(
                f"{self.source or 'config'}: section '{section}' is required for this command",
                code="config.missing_section",
            )
        return value

    def with_overrides(self, seed: int = None, chains: int = None) -> 'RunConfig':
        out = self
        if seed is not None:
            out = replace(out, anneal=replace(out.anneal, rng_seed=seed))
        if chains is not None:
            if chains < 1:
                raise ConfigError(f"chains must be >= 1, got {chains}", code="config.chains")
            out = replace(out, num_chains=chains)
        return out


def _section(raw: Mapping[str, Any], key: str, required: bool = False) -> Optional[Dict[str, Any]]:
    value = raw.get(key)
    if value is None:
        if required:
            raise ConfigError(f"missing section '{key}'", code="config.missing_section")
        return None
    if not isinstance(value, dict):
        raise ConfigError(f"section '{key}' must be a mapping", code="config.invalid")
    return value


def _get(section: Mapping[str, Any], key: str, kind=float, default: Any = ...):
    if key not in section:
        if default is ...:
            raise ConfigError(f"missing key '{key}'", code="config.missing_key")
        return default
    try:
        return kind(section[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key '{key}': cannot read {section[key]!r} as {kind.__name__}") from exc


def _flag(section: Mapping[str, Any], key: str, default: bool) -> bool:
    value = section.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"key '{key}': expected true or false, got {value!r}")
    return value


def _model(raw: Mapping[str, Any], name: str) -> ModelSpec:
    preset = raw.get('preset')
    if preset is not None:
        if preset not in LLAMA:
            raise ConfigError(f"model {name}: unknown preset {preset!r}", code="config.unknown_preset")
        return replace(LLAMA[preset], name=name)
    return ModelSpec(
        name=name,
        num_layers=_get(raw, 'num_layers', int),
        num_heads=_get(raw, 'num_heads', int),
        hidden_size=_get(raw, 'hidden_size', int),
        intermediate_size=_get(raw, 'intermediate_size', int),
        vocab_size=_get(raw, 'vocab_size', int, 32000),
    )


def _ref(models: Mapping[str, ModelSpec], name: Any, where: str) -> ModelSpec:
    if name not in models:
        raise ConfigError(f"{where}: unknown model {name!r}", code="config.unknown_model")
    return models[name]


def _strategy(raw: Any, where: str) -> ParallelStrategy:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: strategy must be a mapping with dp, pp, tp")
    return ParallelStrategy(_get(raw, 'dp', int), _get(raw, 'pp', int), _get(raw, 'tp', int))


def _lengths(raw: Mapping[str, Any], base_dir: Path) -> LengthDistribution:
    kind = raw.get('kind', 'lognormal')
    max_len = _get(raw, 'max_tokens', int, 2048)
    if kind == 'empirical':
        path = Path(str(raw.get('file', '')))
        if not path.is_absolute():
            path = base_dir / path
        return LengthDistribution(kind='empirical', max_len=max_len, values=load_lengths(str(path)))
    return LengthDistribution(
        kind=kind,
        median=_get(raw, 'median_tokens', float, 200),
        p999_ratio=_get(raw, 'p999_ratio', float, 10.0),
        max_len=max_len,
    )


def _grid(raw: Any) -> Tuple[float, ...]:
    if raw is None:
        return DEFAULT_GRID
    if isinstance(raw, dict):
        start, stop, step = (_get(raw, k) for k in ('start', 'stop', 'step'))
        if step <= 0 or start <= 0 or stop < start:
            raise ConfigError("sweep grid needs 0 < start <= stop and step > 0", code="config.grid")
        count = int(round((stop - start) / step)) + 1
        return tuple(round(start + k * step, 6) for k in range(count))
    try:
        grid = tuple(float(x) for x in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("sweep grid must be a list of ratios", code="config.grid") from exc
    if not grid:
        raise ConfigError("sweep grid must not be empty", code="config.grid")
    return grid


def _cluster(raw: Mapping[str, Any]) -> ClusterSpec:
    return ClusterSpec(
        num_gpus=_get(raw, 'num_gpus', int),
        gpus_per_node=_get(raw, 'gpus_per_node', int, 8),
        activation_capacity_per_stage=_get(raw, 'activation_capacity_bytes', float, float('inf')),
        kv_capacity_per_instance=_get(raw, 'kv_capacity_bytes', float, 80e9),
        bs_max=_get(raw, 'bs_max', int, 256),
        interconnect_bandwidth=_get(raw, 'interconnect_bandwidth_bytes_per_second', float, 100e9),
        gpu_memory_bytes=_get(raw, 'gpu_memory_bytes', float, 80e9),
    )


def _cost(raw: Optional[Mapping[str, Any]]) -> CostModel:
    if raw is None:
        return CostModel()
    defaults = CostModel()
    return CostModel(
        time_per_token_coeff=_get(raw, 'time_per_token_coeff', float, defaults.time_per_token_coeff),
        backward_forward_ratio=_get(raw, 'backward_forward_ratio', float, defaults.backward_forward_ratio),
        activation_bytes_coeff=_get(raw, 'activation_bytes_coeff', float, defaults.activation_bytes_coeff),
        decode_step_base=_get(raw, 'decode_step_seconds', float, defaults.decode_step_base),
        comm_bandwidth=_get(raw, 'comm_bandwidth_bytes_per_second', float, defaults.comm_bandwidth),
        include_embedding_latency=_flag(raw, 'include_embedding_latency', defaults.include_embedding_latency),
    )


def _anneal(raw: Optional[Mapping[str, Any]]) -> Tuple[AnnealParams, int]:
    if raw is None:
        return AnnealParams(), 1
    defaults = AnnealParams()
    params = AnnealParams(
        alpha=_get(raw, 'alpha', float, defaults.alpha),
        epsilon=_get(raw, 'epsilon', float, defaults.epsilon),
        swap_retry_limit=_get(raw, 'swap_retry_limit', int, defaults.swap_retry_limit),
        rng_seed=_get(raw, 'seed', int, defaults.rng_seed),
        neighbors_per_temperature=_get(
            raw, 'neighbors_per_temperature', int, defaults.neighbors_per_temperature
        ),
        temperature_scale=_get(raw, 'temperature_scale', float, defaults.temperature_scale),
        critical_rate=_get(raw, 'critical_rate', float, defaults.critical_rate),
        shift_rate=_get(raw, 'shift_rate', float, defaults.shift_rate),
    )
    return params, _get(raw, 'num_chains', int, 1)


def _schedule(raw: Mapping[str, Any], models: Mapping[str, ModelSpec]) -> ScheduleProblem:
    model_b = raw.get('model_b')
    return ScheduleProblem(
        model_a=_ref(models, raw.get('model_a'), 'schedule.model_a'),
        strategy_a=_strategy(raw.get('strategy_a'), 'schedule.strategy_a'),
        model_b=_ref(models, model_b, 'schedule.model_b') if model_b is not None else None,
        strategy_b=_strategy(raw.get('strategy_b'), 'schedule.strategy_b') if model_b is not None else None,
        global_batch=_get(raw, 'global_batch_samples', int),
        microbatch_size=_get(raw, 'microbatch_samples', int, 1),
        seq_len=_get(raw, 'seq_len_tokens', int, 1024),
        layer_split=str(raw.get('layer_split', 'even')),
        comm=_get(raw, 'comm_seconds', float, 0.0),
    )


def _generation(raw: Mapping[str, Any], models: Mapping[str, ModelSpec], base_dir: Path) -> GenerationSetup:
    tasks = []
    for i, item in enumerate(raw.get('inference') or ()):
        if not isinstance(item, dict):
            raise ConfigError(f"generation.inference[{i}] must be a mapping")
        tasks.append(
            InferenceTask(
                str(item.get('name', f'task{i}')),
                _ref(models, item.get('model'), f'generation.inference[{i}]'),
            )
        )
    return GenerationSetup(
        actor=_ref(models, raw.get('actor'), 'generation.actor'),
        inference_tasks=tuple(tasks),
        num_instances=_get(raw, 'num_instances', int),
        gpus_per_instance=_get(raw, 'gpus_per_instance', int, 8),
        global_batch=_get(raw, 'global_batch_samples', int, 512),
        prompt_len=_get(raw, 'prompt_tokens', int, 128),
        lengths=_lengths(_section(raw, 'lengths') or {}, base_dir),
        seed=_get(raw, 'seed', int, 0),
    )


def _iteration(
    raw: Mapping[str, Any],
    models: Mapping[str, ModelSpec],
    anneal: AnnealParams,
    num_chains: int,
    grid: Tuple[float, ...],
    base_dir: Path,
) -> IterationConfig:
    return IterationConfig(
        actor=_ref(models, raw.get('actor'), 'iteration.actor'),
        critic=_ref(models, raw.get('critic'), 'iteration.critic'),
        ref=_ref(models, raw.get('ref', raw.get('actor')), 'iteration.ref'),
        reward=_ref(models, raw.get('reward', raw.get('critic')), 'iteration.reward'),
        actor_train=_strategy(raw.get('actor_train'), 'iteration.actor_train'),
        critic_train=_strategy(raw.get('critic_train'), 'iteration.critic_train'),
        lengths=_lengths(_section(raw, 'lengths') or {}, base_dir),
        generation_gpus=_get(raw, 'generation_gpus', int, 8),
        global_batch=_get(raw, 'global_batch_samples', int, 512),
        mini_batch=_get(raw, 'mini_batch_samples', int, 64),
        prompt_len=_get(raw, 'prompt_tokens', int, 128),
        microbatch_size=_get(raw, 'microbatch_samples', int, 1),
        layer_split=str(raw.get('layer_split', 'even')),
        switch_setup_seconds=_get(raw, 'switch_setup_seconds', float, 0.02),
        weight_swap_seconds=_get(raw, 'weight_swap_seconds', float, 0.0),
        anneal=anneal,
        num_chains=num_chains,
        sweep_grid=grid,
        seed=_get(raw, 'seed', int, 0),
    )


def parse_config(raw: Any, source: str = '', base_dir: Path = None) -> RunConfig:
    """
    Build a RunConfig from a parsed YAML document; every domain type is
    constructed, so every domain invariant is checked here.
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"{source or 'config'}: top level must be a mapping")
    base_dir = base_dir or Path('.')
    models = {
        str(name): _model(spec or {}, str(name))
        for name, spec in (_section(raw, 'models') or {}).items()
    }
    anneal, num_chains = _anneal(_section(raw, 'anneal'))
    grid = _grid((_section(raw, 'sweep') or {}).get('grid'))
    schedule = _section(raw, 'schedule')
    generation = _section(raw, 'generation')
    iteration = _section(raw, 'iteration')
    baselines = _section(raw, 'baselines')
    gae = _section(raw, 'gae') or {}

    config = RunConfig(
        cluster=_cluster(_section(raw, 'cluster', required=True)),
        cost=_cost(_section(raw, 'cost')),
        models=models,
        anneal=anneal,
        num_chains=num_chains,
        schedule=_schedule(schedule, models) if schedule else None,
        generation=_generation(generation, models, base_dir) if generation else None,
        sweep_grid=grid,
        iteration=(
            _iteration(iteration, models, anneal, num_chains, grid, base_dir) if iteration else None
        ),
        baselines=(
            BaselineProblem(
                stages=_get(baselines, 'stages', int),
                microbatches=_get(baselines, 'microbatches', int),
                chunks=_get(baselines, 'chunks', int, 1),
                fwd=_get(baselines, 'fwd_seconds', float, 1.0),
                bwd=_get(baselines, 'bwd_seconds', float, 2.0),
                comm=_get(baselines, 'comm_seconds', float, 0.0),
            )
            if baselines
            else None
        ),
        gae=GaeCheck(
            instances=_get(gae, 'instances', int, 1000),
            max_horizon=_get(gae, 'max_horizon', int, 4096),
            gamma=_get(gae, 'gamma', float, 0.99),
            lam=_get(gae, 'lam', float, 0.95),
            seed=_get(gae, 'seed', int, 0),
            tolerance=_get(gae, 'tolerance', float, 1e-10),
        ),
        source=source,
    )
    if num_chains < 1:
        raise ConfigError(f"anneal.num_chains must be >= 1, got {num_chains}", code="config.chains")
    return config


def load_config(path: str) -> RunConfig:
    file = Path(path)
    try:
        raw = yaml.safe_load(file.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", code="config.unreadable") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}", code="config.yaml") from exc
    config = parse_config(raw, source=str(path), base_dir=file.parent)
    logger.info("loaded config %s (%d models)", path, len(config.models))
    return config
