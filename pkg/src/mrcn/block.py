"""The MRCN block: normalize, split the residual, restitute and compensate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import torch.nn as nn

from mrcn.attention import DEFAULT_REDUCTION, ChannelAttention, attention_weights, distill
from mrcn.errors import ContractError
from mrcn.modality_norm import (
    DEFAULT_EPS,
    FeatureMap,
    Modality,
    ModalityNorm,
    instance_normalize,
    modality_residual,
)

BRANCHES = ("v", "n", "v_plus", "n_plus", "v_minus", "n_minus")


@dataclass
class MrcnBranches:
    """Per-pair branch maps. Restituted/compensated maps are None when their module is off."""

    f_v: FeatureMap
    f_n: FeatureMap
    f_v_plus: Optional[FeatureMap] = None
    f_n_plus: Optional[FeatureMap] = None
    f_v_minus: Optional[FeatureMap] = None
    f_n_minus: Optional[FeatureMap] = None

    def items(self) -> Iterator[tuple[str, FeatureMap]]:
        for name in BRANCHES:
            fmap = getattr(self, "f_" + name)
            if fmap is not None:
                yield name, fmap

    def names(self) -> list[str]:
        return [name for name, _ in self.items()]


def _check_same_shape(a: FeatureMap, b: FeatureMap):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mrm_restitute(normed: FeatureMap, m_plus: FeatureMap) -> FeatureMap:
    """Add the distilled identity-relevant residual back to the same modality's normalized map."""
    _check_same_shape(normed, m_plus)
    if normed.modality != m_plus.modality:
        raise ContractError("restitution must pair a normalized map with its own modality's residual")
    return FeatureMap(normed.data + m_plus.data, normed.modality)


def mcm_compensate(normed: FeatureMap, m_minus_other: FeatureMap) -> FeatureMap:
    """Add the other modality's distilled modality-relevant residual to a normalized map."""
    _check_same_shape(normed, m_minus_other)
    if normed.modality == m_minus_other.modality:
        raise ContractError("compensation must use the residual of the opposite modality")
    return FeatureMap(normed.data + m_minus_other.data, normed.modality)


class MRCNBlock(nn.Module):
    """Two IN layers plus up to four channel-attention gates.

    ``att_*1`` feed restitution (MRM), ``att_*2`` feed compensation (MCM).
    """

    def __init__(self, channels: int, use_mrm: bool = True, use_mcm: bool = True,
                 reduction: int = DEFAULT_REDUCTION, eps: float = DEFAULT_EPS):
        super().__init__()
        if not (use_mrm or use_mcm):
            raise ContractError("an MRCN block needs at least one of MRM or MCM")
        self.channels = channels
        self.use_mrm = use_mrm
        self.use_mcm = use_mcm
        self.norm_v = ModalityNorm(channels, eps)
        self.norm_n = ModalityNorm(channels, eps)
        if use_mrm:
            self.att_v1 = ChannelAttention(channels, reduction)
            self.att_n1 = ChannelAttention(channels, reduction)
        if use_mcm:
            self.att_v2 = ChannelAttention(channels, reduction)
            self.att_n2 = ChannelAttention(channels, reduction)

    @staticmethod
    def declared_sizes(channels: int, reduction: int = DEFAULT_REDUCTION) -> dict[str, int]:
        """Parameter counts contributed by each separable part of the block."""
        att = ChannelAttention.param_count(channels, reduction)
        return {"norm": 4 * channels, "mrm": 2 * att, "mcm": 2 * att}

    def _norm(self, modality: Modality) -> ModalityNorm:
        return self.norm_v if modality is Modality.VIS else self.norm_n

    def normalize(self, fmap: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
        normed = instance_normalize(fmap, self._norm(fmap.modality).params)
        return normed, modality_residual(fmap, normed)

    def forward_pair(self, batch_v: FeatureMap, batch_n: FeatureMap) -> MrcnBranches:
        if batch_v.modality is not Modality.VIS or batch_n.modality is not Modality.NIR:
            raise ContractError("forward_pair expects (VIS, NIR) feature maps in that order")
        _check_same_shape(batch_v, batch_n)
        normed_v, res_v = self.normalize(batch_v)
        normed_n, res_n = self.normalize(batch_n)
        out = MrcnBranches(f_v=batch_v, f_n=batch_n)
        if self.use_mrm:
            out.f_v_plus = mrm_restitute(normed_v, distill(res_v, attention_weights(res_v, self.att_v1)))
            out.f_n_plus = mrm_restitute(normed_n, distill(res_n, attention_weights(res_n, self.att_n1)))
        if self.use_mcm:
            m_v_minus = distill(res_v, attention_weights(res_v, self.att_v2))
            m_n_minus = distill(res_n, attention_weights(res_n, self.att_n2))
            out.f_v_minus = mcm_compensate(normed_v, m_n_minus)
            out.f_n_minus = mcm_compensate(normed_n, m_v_minus)
        return out

    def restitute(self, fmap: FeatureMap) -> FeatureMap:
        """Inference path: the MRM branch for a single modality."""
        if not self.use_mrm:
            raise ContractError("restitution requested but MRM is disabled")
        normed, res = self.normalize(fmap)
        att = self.att_v1 if fmap.modality is Modality.VIS else self.att_n1
        return mrm_restitute(normed, distill(res, attention_weights(res, att)))


def forward_pair(batch_v: FeatureMap, batch_n: FeatureMap, block: MRCNBlock) -> MrcnBranches:
    return block.forward_pair(batch_v, batch_n)
