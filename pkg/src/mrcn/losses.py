"""Center-quadruplet causal loss, identity losses, and the weighted objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from mrcn.errors import ContractError

CENTER_BRANCHES = ("v", "n", "v_plus", "n_plus", "v_minus", "n_minus")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.2
    smoothing: float = 0.1
    triplet_margin: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("alpha, lambda1 and lambda2 must be non-negative")
        if not 0 <= self.smoothing < 1:
            raise ContractError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.triplet_margin < 0:
            raise ContractError("triplet margin must be non-negative")


@dataclass
class CenterTable:
    """Minibatch per-identity centers, one ``C x d`` tensor per branch. Rows follow ``identities``."""

    identities: torch.Tensor
    centers: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.identities.numel())

    def __getitem__(self, branch: str) -> torch.Tensor:
        try:
            return self.centers[branch]
        except KeyError:
            raise ContractError(f"center table has no {branch!r} branch") from None

    def subset(self, rows) -> "CenterTable":
        rows = torch.as_tensor(rows, dtype=torch.long)
        return CenterTable(self.identities[rows], {k: v[rows] for k, v in self.centers.items()})


def class_centers(embeddings: torch.Tensor, labels: torch.Tensor,
                  identities: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean embedding per identity. Returns ``(identities, centers)`` sorted by identity unless given."""
    if embeddings.dim() != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ContractError("embeddings must be (N, d) with one label per row")
    if identities is None:
        identities = torch.unique(labels)
    onehot = (labels[None, :] == identities[:, None]).to(embeddings.dtype)
    counts = onehot.sum(dim=1)
    if (counts == 0).any():
        missing = identities[counts == 0].tolist()
        raise ContractError(f"identities with no embeddings in this branch: {missing}")
    return identities, (onehot @ embeddings) / counts[:, None]


def center_table(branch_embeddings: Mapping[str, torch.Tensor], labels: Mapping[str, torch.Tensor] | torch.Tensor,
                 ) -> CenterTable:
    """Build a CenterTable, using one shared identity ordering across branches."""
    def lab(b):
        return labels[b] if isinstance(labels, Mapping) else labels

    ids = torch.unique(torch.cat([lab(b) for b in branch_embeddings]))
    table = CenterTable(ids)
    for b, emb in branch_embeddings.items():
        _, table.centers[b] = class_centers(emb, lab(b), ids)
    return table


def euclidean_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean distance along the last axis."""
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"length mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return torch.linalg.vector_norm(a - b, dim=-1)


def _quadruplet_hinge(c_v, c_n, c_v_x, c_n_x, alpha: float) -> torch.Tensor:
    d = euclidean_distance
    term_v = torch.relu(alpha + d(c_v_x, c_n) - d(c_v_x, c_v))
    term_n = torch.relu(alpha + d(c_n_x, c_v) - d(c_n_x, c_n))
    return term_v.sum() + term_n.sum()


def cqc_mrm(centers: CenterTable, alpha: float = 0.2) -> torch.Tensor:
    return _quadruplet_hinge(centers["v"], centers["n"], centers["v_plus"], centers["n_plus"], alpha)


def cqc_mcm(centers: CenterTable, alpha: float = 0.2) -> torch.Tensor:
    return _quadruplet_hinge(centers["v"], centers["n"], centers["v_minus"], centers["n_minus"], alpha)


def cqc_total(centers: CenterTable, alpha: float = 0.2) -> torch.Tensor:
    """Sum of whichever MRM/MCM parts the table supports; zero if neither."""
    total = centers["v"].new_zeros(())
    if "v_plus" in centers.centers:
        total = total + cqc_mrm(centers, alpha)
    if "v_minus" in centers.centers:
        total = total + cqc_mcm(centers, alpha)
    return total


def label_smoothed_ce(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    if not 0 <= smoothing < 1:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    log_p = F.log_softmax(logits, dim=1)
    target = torch.full_like(log_p, smoothing / k)
    target.scatter_add_(1, labels[:, None], torch.full_like(log_p[:, :1], 1.0 - smoothing))
    return -(target * log_p).sum(dim=1).mean()


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.t()
    # clamp keeps sqrt differentiable on the diagonal
    return d2.clamp_min(1e-12).sqrt()


def batch_hard_triplet(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Hardest positive / hardest negative per anchor, hinge with ``margin``, averaged."""
    dist = pairwise_distances(embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if not pos.any(dim=1).all() or not neg.any(dim=1).all():
        raise ContractError("every anchor needs at least one positive and one negative")
    hardest_pos = dist.masked_fill(~pos, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg, float("inf")).min(dim=1).values
    return torch.relu(margin + hardest_pos - hardest_neg).mean()


def total_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights):
    return parts["lsce"] + weights.lambda1 * parts["tri"] + weights.lambda2 * parts["cqc"]
