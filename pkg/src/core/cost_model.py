# src/core/cost_model.py
# Analytical latency and memory model. Every simulated duration in the package
# is derived from these functions.

import math

from src.core.specs import CostModel, ModelSpec
from src.core.errors import ConfigError

DIRECTIONS = ('fwd', 'bwd')


def _check_positive(**values):
    for name, value in values.items():
        if value is None or value <= 0:
            raise ConfigError(
                f"{name} must be strictly positive, got {value!r}",
                code="config.non_positive",
            )


def estimate_params(spec: ModelSpec) -> int:
    """
    Decoder parameter count.

    num_layers * (4*h^2 + 2*h*i) for attention and MLP weights, plus
    2 * vocab * h for the input embedding and the untied output head.
    """
    return spec.num_layers * spec.params_per_layer + 2 * spec.vocab_size * spec.hidden_size


def stage_params(spec: ModelSpec, layers_in_stage: float) -> float:
    return layers_in_stage * spec.params_per_layer


def subtask_latency(
    spec: ModelSpec,
    layers_in_stage: float,
    seq_len: int,
    mb_size: int,
    direction: str,
    cost: CostModel,
) -> float:
    """
    Args:
        spec: Model shape
        layers_in_stage: Transformer layers executed by the stage (may be
            fractional under the fractional layer split)
        seq_len: Tokens per sample
        mb_size: Samples per micro-batch
        direction: 'fwd' or 'bwd'
        cost: Cost coefficients
    Returns:
        Latency in seconds on a single GPU
    """
    _check_positive(layers_in_stage=layers_in_stage, seq_len=seq_len, mb_size=mb_size)
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}", code="config.direction")
    forward = (
        stage_params(spec, layers_in_stage) * seq_len * mb_size * cost.time_per_token_coeff
    )
    if direction == 'bwd':
        return forward * cost.backward_forward_ratio
    return forward


def vocab_latency(spec: ModelSpec, seq_len: int, mb_size: int, direction: str, cost: CostModel) -> float:
    """Time of one vocab x hidden matrix (embedding or output head) on a single GPU."""
    _check_positive(seq_len=seq_len, mb_size=mb_size)
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}", code="config.direction")
    forward = spec.vocab_size * spec.hidden_size * seq_len * mb_size * cost.time_per_token_coeff
    return forward * cost.backward_forward_ratio if direction == 'bwd' else forward


def activation_per_microbatch(
    spec: ModelSpec,
    layers_in_stage: float,
    seq_len: int,
    mb_size: int,
    cost: CostModel,
) -> float:
    _check_positive(layers_in_stage=layers_in_stage, seq_len=seq_len, mb_size=mb_size)
    return cost.activation_bytes_coeff * spec.hidden_size * seq_len * mb_size * layers_in_stage


def prefill_latency(spec: ModelSpec, tokens: int, cost: CostModel, num_gpus: int = 1) -> float:
    """Forward pass over `tokens` through every layer, spread over num_gpus."""
    if tokens <= 0:
        return 0.0
    return subtask_latency(spec, spec.num_layers, tokens, 1, 'fwd', cost) / num_gpus


def decode_step_latency(batch: int, bs_max: int, base: float) -> float:
    # flat up to bs_max, linear beyond
    return base * max(1.0, batch / bs_max)


def kv_bytes(spec: ModelSpec, tokens: int) -> int:
    return spec.kv_bytes_per_token * tokens


def weight_bytes(spec: ModelSpec, bytes_per_param: int = 2) -> int:
    return estimate_params(spec) * bytes_per_param


def ceil_div(a: float, b: float) -> int:
    return int(math.ceil(a / b))
