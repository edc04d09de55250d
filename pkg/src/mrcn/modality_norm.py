"""Per-modality instance normalization and the residual it removes."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn

from mrcn.errors import ContractError

DEFAULT_EPS = 1e-5


class Modality(enum.IntEnum):
    VIS = 0
    NIR = 1

    @property
    def other(self) -> "Modality":
        return Modality.NIR if self is Modality.VIS else Modality.VIS


@dataclass(frozen=True)
class FeatureMap:
    """An N x C x H x W activation tensor tagged with the modality it came from."""

    data: torch.Tensor
    modality: Modality

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ContractError(f"FeatureMap needs a rank-4 tensor, got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ContractError(f"FeatureMap dimensions must be >= 1, got {tuple(self.data.shape)}")
        if not isinstance(self.modality, Modality):
            raise ContractError(f"modality must be a Modality, got {self.modality!r}")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape

    def check_finite(self) -> "FeatureMap":
        if not torch.isfinite(self.data).all():
            raise ContractError("FeatureMap contains non-finite entries")
        return self


@dataclass(frozen=True)
class InstanceNormParams:
    gamma: torch.Tensor
    beta: torch.Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError(f"epsilon must be positive, got {self.eps}")
        if self.gamma.shape != self.beta.shape or self.gamma.dim() != 1:
            raise ContractError("gamma and beta must be 1-D tensors of equal length")

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS, dtype=torch.float32) -> "InstanceNormParams":
        return cls(torch.ones(channels, dtype=dtype), torch.zeros(channels, dtype=dtype), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def instance_norm_tensor(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                         eps: float = DEFAULT_EPS) -> torch.Tensor:
    # biased variance over the spatial extent, eps inside the sqrt
    mean = x.mean(dim=(2, 3), keepdim=True)
    centered = x - mean
    var = centered.pow(2).mean(dim=(2, 3), keepdim=True)
    normed = centered / torch.sqrt(var + eps)
    return normed * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def instance_normalize(fmap: FeatureMap, params: InstanceNormParams) -> FeatureMap:
    """Normalize each (sample, channel) slice to zero mean and unit variance, then apply gamma/beta."""
    if fmap.shape[1] != params.channels:
        raise ContractError(
            f"params have {params.channels} channels but feature map has {fmap.shape[1]}")
    fmap.check_finite()
    out = instance_norm_tensor(fmap.data, params.gamma, params.beta, params.eps)
    return FeatureMap(out, fmap.modality)


def modality_residual(fmap: FeatureMap, normed: FeatureMap) -> FeatureMap:
    """The information removed by normalization: ``fmap - normed``."""
    if fmap.shape != normed.shape:
        raise ContractError(f"shape mismatch {tuple(fmap.shape)} vs {tuple(normed.shape)}")
    if fmap.modality != normed.modality:
        raise ContractError(f"modality mismatch {fmap.modality.name} vs {normed.modality.name}")
    return FeatureMap(fmap.data - normed.data, fmap.modality)


class ModalityNorm(nn.Module):
    """Learnable instance normalization layer for one modality."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS):
        super().__init__()
        if eps <= 0:
            raise ContractError(f"epsilon must be positive, got {eps}")
        self.channels = channels
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    @property
    def params(self) -> InstanceNormParams:
        return InstanceNormParams(self.gamma, self.beta, self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return instance_norm_tensor(x, self.gamma, self.beta, self.eps)

    def extra_repr(self) -> str:
        return f"{self.channels}, eps={self.eps}"
