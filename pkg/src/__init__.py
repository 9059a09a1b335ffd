"""fuseplan: fused pipeline schedules and RLHF stage-fusion simulation."""

__version__ = "0.1.0"
