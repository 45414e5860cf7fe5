from .policy import (
    CategoricalSeqPolicy,
    decode_all,
    evaluate,
    grpo_step,
    headline_metric,
    sample_group,
    sft_step,
)
from .tasks import Episode, GridSpec, SyntheticTask, generate_synthetic
from .trainer import ToyGRPO

__all__ = [
    "CategoricalSeqPolicy", "Episode", "GridSpec", "SyntheticTask", "ToyGRPO",
    "decode_all", "evaluate", "generate_synthetic", "grpo_step", "headline_metric",
    "sample_group", "sft_step",
]
