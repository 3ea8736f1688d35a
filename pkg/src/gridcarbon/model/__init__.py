"""Emission network: encoders, contrastive coupling, fusion, neighborhood context, head."""

from .layers import (
    ModelError, aggregate_attention, attention_scores, cross_attention, mae, ntxent, se_block,
    se_gates, total_loss,
)
from .network import (
    KV_MODES, CarbonNet, ForwardResult, ModelConfig, ModelInputs, ParameterStore, parameter_shapes,
)
