# src/core/specs.py
# Domain types: model shapes, parallel strategies, the analytical cost model
# coefficients and the cluster description.

from dataclasses import dataclass

from src.core.errors import ConfigError


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def _require_positive(owner: str, **fields):
    for name, value in fields.items():
        if value is None or value <= 0:
            raise ConfigError(
                f"{owner}.{name} must be strictly positive, got {value!r}",
                code="config.non_positive",
            )


@dataclass(frozen=True)
class ModelSpec:
    """Decoder-only transformer shape."""

    name: str
    num_layers: int
    num_heads: int
    hidden_size: int
    intermediate_size: int
    vocab_size: int = 32000

    def __post_init__(self):
        if not self.name:
            raise ConfigError("ModelSpec.name must be non-empty")
        _require_positive(
            "ModelSpec",
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            hidden_size=self.hidden_size,
            intermediate_size=self.intermediate_size,
            vocab_size=self.vocab_size,
        )

    @property
    def params_per_layer(self) -> int:
        h = self.hidden_size
        return 4 * h * h + 2 * h * self.intermediate_size

    @property
    def kv_bytes_per_token(self) -> int:
        # K and V for every layer, 2-byte elements
        return 2 * self.num_layers * self.hidden_size * 2


@dataclass(frozen=True)
class ParallelStrategy:
    dp: int
    pp: int
    tp: int

    def __post_init__(self):
        _require_positive("ParallelStrategy", dp=self.dp, pp=self.pp, tp=self.tp)
        if not is_power_of_two(self.tp):
            raise ConfigError(
                f"tp must be a power of two, got {self.tp}", code="config.tp_power"
            )

    @property
    def num_gpus(self) -> int:
        return self.dp * self.pp * self.tp

    def check_pool(self, num_gpus: int):
        if self.num_gpus != num_gpus:
            raise ConfigError(
                f"strategy dp={self.dp} pp={self.pp} tp={self.tp} uses "
                f"{self.num_gpus} GPUs, pool has {num_gpus}",
                code="config.pool_mismatch",
            )


@dataclass(frozen=True)
class CostModel:
    """Analytical latency and memory coefficients.

    time_per_token_coeff is seconds per (parameter x token) on one GPU;
    latencies of work spread over g GPUs are divided by g by the callers.
    include_embedding_latency charges the input embedding to the first stage
    and the output head to the last stage of every pipeline.
    """

    time_per_token_coeff: float = 2.5e-14
    backward_forward_ratio: float = 2.0
    activation_bytes_coeff: float = 34.0
    decode_step_base: float = 0.03
    comm_bandwidth: float = 25e9
    include_embedding_latency: bool = False

    def __post_init__(self):
        _require_positive(
            "CostModel",
            time_per_token_coeff=self.time_per_token_coeff,
            backward_forward_ratio=self.backward_forward_ratio,
            activation_bytes_coeff=self.activation_bytes_coeff,
            decode_step_base=self.decode_step_base,
            comm_bandwidth=self.comm_bandwidth,
        )
        if self.backward_forward_ratio < 1:
            raise ConfigError(
                "backward_forward_ratio must be >= 1", code="config.bwd_ratio"
            )


@dataclass(frozen=True)
class ClusterSpec:
    num_gpus: int
    gpus_per_node: int
    activation_capacity_per_stage: float
    kv_capacity_per_instance: float
    bs_max: int
    interconnect_bandwidth: float
    gpu_memory_bytes: float = 80e9

    def __post_init__(self):
        _require_positive(
            "ClusterSpec",
            num_gpus=self.num_gpus,
            gpus_per_node=self.gpus_per_node,
            activation_capacity_per_stage=self.activation_capacity_per_stage,
            kv_capacity_per_instance=self.kv_capacity_per_instance,
            bs_max=self.bs_max,
            interconnect_bandwidth=self.interconnect_bandwidth,
            gpu_memory_bytes=self.gpu_memory_bytes,
        )
        if self.num_gpus % self.gpus_per_node:
            raise ConfigError(
                f"num_gpus {self.num_gpus} not divisible by gpus_per_node "
                f"{self.gpus_per_node}",
                code="config.cluster_shape",
            )


# Reference decoder shapes (layers, heads, hidden, intermediate).
LLAMA = {
    '13B': ModelSpec('llama-13b', 40, 40, 5120, 20480),
    '33B': ModelSpec('llama-33b', 60, 52, 6656, 26624),
    '65B': ModelSpec('llama-65b', 80, 64, 8192, 32768),
}
