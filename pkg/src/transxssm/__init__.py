"""Hybrid attention / state-space language model with one shared rotary
position embedding, plus the verification suite for its algebra."""

__version__ = "0.1.0"

from .tensor import Tensor, Rng, NonFiniteError, no_grad, set_default_dtype
from .rope import FrequencyTable, build_frequencies, rotate, relative_score, log_position_scale
from .ssd import SSDInputs, decay_mask, ssd_recurrent, ssd_matrix, ssd_chunked
from .attention import AttentionInputs, causal_attention, linear_attention_step
from .lm import ModelConfig, micro_config, init_lm, build_tables, model_forward, generate
from .train import TrainConfig, train

__all__ = [
    "Tensor",
    "Rng",
    "NonFiniteError",
    "no_grad",
    "set_default_dtype",
    "FrequencyTable",
    "build_frequencies",
    "rotate",
    "relative_score",
    "log_position_scale",
    "SSDInputs",
    "decay_mask",
    "ssd_recurrent",
    "ssd_matrix",
    "ssd_chunked",
    "AttentionInputs",
    "causal_attention",
    "linear_attention_step",
    "ModelConfig",
    "micro_config",
    "init_lm",
    "build_tables",
    "model_forward",
    "generate",
    "TrainConfig",
    "train",
]
