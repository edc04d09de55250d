"""SE-style channel attention used to split a modality residual into gated parts."""

from __future__ import annotations

import torch
import torch.nn as nn

from mrcn.errors import ContractError
from mrcn.modality_norm import FeatureMap

DEFAULT_REDUCTION = 16


def hidden_dim(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
    return max(1, channels // reduction)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: GAP -> FC -> ReLU -> FC -> sigmoid.

    Returns one weight in (0, 1) per sample and channel.
    """

    def __init__(self, channels: int, reduction: int = DEFAULT_REDUCTION):
        super().__init__()
        if reduction < 1:
            raise ContractError(f"reduction must be a positive integer, got {reduction}")
        self.channels = channels
        self.reduction = reduction
        hidden = hidden_dim(channels, reduction)
        self.w1 = nn.Linear(channels, hidden)
        self.w2 = nn.Linear(hidden, channels)
        for fc in (self.w1, self.w2):
            nn.init.kaiming_uniform_(fc.weight, nonlinearity="relu")
            nn.init.zeros_(fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.w2(torch.relu(self.w1(pooled))))
        # sigmoid rounds to exactly 0 or 1 for large inputs; keep the gate strictly inside
        eps = torch.finfo(gate.dtype).eps
        return gate.clamp(eps, 1.0 - eps / 2)

    @staticmethod
    def param_count(channels: int, reduction: int = DEFAULT_REDUCTION) -> int:
        h = hidden_dim(channels, reduction)
        return channels * h + h + h * channels + channels


def attention_weights(residual: FeatureMap, att: ChannelAttention) -> torch.Tensor:
    if residual.shape[1] != att.channels:
        raise ContractError(
            f"attention expects {att.channels} channels, feature map has {residual.shape[1]}")
    return att(residual.data)


def distill(residual: FeatureMap, weights: torch.Tensor) -> FeatureMap:
    """Scale each channel of ``residual`` by its per-sample weight."""
    n, c = residual.shape[:2]
    if tuple(weights.shape) != (n, c):
        raise ContractError(f"weights shape {tuple(weights.shape)} does not match N x C = {(n, c)}")
    return FeatureMap(residual.data * weights[:, :, None, None], residual.modality)
