"""Dense FFN to routed-expert factorization, routing losses and analysis."""

from ._core import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    IngestError,
    balance_loss,
    count_flops,
    ft_loss,
    overall_loss,
    pa_loss,
    pseudo_allocation,
    route_stats,
    run_cli,
    split_ffn,
    topk_select,
    verify_split,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "IngestError",
    "balance_loss",
    "count_flops",
    "ft_loss",
    "overall_loss",
    "pa_loss",
    "pseudo_allocation",
    "route_stats",
    "run_cli",
    "split_ffn",
    "topk_select",
    "verify_split",
]
