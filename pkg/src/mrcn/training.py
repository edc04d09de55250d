"""Optimization loop: warmup/step schedule, SGD with momentum, ablation switches."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mrcn.data import AugmentConfig, PKBatch, PKSampler, ReIDDataset, augment, resize
from mrcn.errors import ConfigError, ContractError
from mrcn.losses import (
    LossWeights,
    batch_hard_triplet,
    center_table,
    cqc_total,
    label_smoothed_ce,
    total_loss,
)
from mrcn.model import MRCNNet, NetworkConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# triplet loss is taken over the VIS+NIR union of each modality pair
BRANCH_PAIRS = (("v", "n"), ("v_plus", "n_plus"), ("v_minus", "n_minus"))


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-2
    peak_lr: float = 1e-1
    warmup_epochs: int = 10
    decay1_epoch: int = 20
    decay1_lr: float = 1e-2
    decay2_epoch: int = 60
    decay2_lr: float = 1e-3
    total_epochs: int = 80

    def __post_init__(self):
        if not 0 < self.warmup_epochs <= self.decay1_epoch <= self.decay2_epoch <= self.total_epochs:
            raise ConfigError("schedule needs 0 < warmup <= decay1 <= decay2 <= total epochs")
        if min(self.base_lr, self.peak_lr, self.decay1_lr, self.decay2_lr) <= 0:
            raise ConfigError("learning rates must be positive")

    def scaled(self, total_epochs: int) -> "ScheduleConfig":
        """Same shape compressed (or stretched) to ``total_epochs``."""
        f = total_epochs / self.total_epochs
        warm = max(1, round(self.warmup_epochs * f))
        d1 = max(warm, round(self.decay1_epoch * f))
        d2 = max(d1, round(self.decay2_epoch * f))
        return replace(self, warmup_epochs=warm, decay1_epoch=d1, decay2_epoch=min(d2, total_epochs),
                       total_epochs=total_epochs)


def learning_rate(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch / cfg.warmup_epochs
    if epoch < cfg.decay1_epoch:
        return cfg.peak_lr
    if epoch < cfg.decay2_epoch:
        return cfg.decay1_lr
    return cfg.decay2_lr


@dataclass(frozen=True)
class AblationConfig:
    use_mrm: bool = True
    use_mcm: bool = True
    use_cqc: bool = True
    stage: int = 1

    @classmethod
    def baseline(cls, stage: int = 1) -> "AblationConfig":
        return cls(False, False, False, stage)


@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    P: int = 4
    K: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    batches_per_epoch: Optional[int] = None
    checkpoint_every: int = 10
    id_loss_branches: Optional[tuple[str, ...]] = None  # None = every available branch
    # CQC centers come from embeddings rescaled to this norm; None uses them raw
    cqc_scale: Optional[float] = 2.0
    # lambda2 grows linearly from 0 over this many epochs
    cqc_warmup_epochs: int = 10

    def __post_init__(self):
        if self.P < 1 or self.K < 1:
            raise ConfigError("P and K must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.cqc_scale is not None and self.cqc_scale <= 0:
            raise ConfigError("cqc_scale must be positive or None")
        if self.cqc_warmup_epochs < 0 or self.checkpoint_every < 1:
            raise ConfigError("cqc_warmup_epochs must be >= 0 and checkpoint_every >= 1")

    def lambda2_at(self, epoch: int) -> float:
        if self.cqc_warmup_epochs == 0:
            return self.weights.lambda2
        return self.weights.lambda2 * min(1.0, epoch / self.cqc_warmup_epochs)


def network_config(ablation: AblationConfig, num_classes: int, **kwargs) -> NetworkConfig:
    kwargs.setdefault("stage", ablation.stage)
    return NetworkConfig(use_mrm=ablation.use_mrm, use_mcm=ablation.use_mcm,
                         num_classes=num_classes, **kwargs)


def make_optimizer(net: MRCNNet, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(net.parameters(), lr=cfg.schedule.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def compute_losses(net: MRCNNet, x_v: torch.Tensor, x_n: torch.Tensor, labels: torch.Tensor,
                   weights: LossWeights, use_cqc: bool = True,
                   id_branches: Optional[Sequence[str]] = None,
                   cqc_scale: Optional[float] = None) -> dict[str, torch.Tensor]:
    """Forward both modalities and return each loss term plus their weighted total.

    The classifier sees the BN-neck output; triplet and CQC use the pooled embeddings.
    """
    emb = net(x_v, x_n)
    n = len(labels)
    names = [b for b in emb if id_branches is None or b in id_branches]
    necked = net.neck(torch.cat([emb[b] for b in names])).split(n)
    lsce = torch.stack([label_smoothed_ce(net.classifier(h), labels, weights.smoothing)
                        for h in necked]).mean()
    pairs = [(a, b) for a, b in BRANCH_PAIRS if a in names and b in names]
    both = torch.cat([labels, labels])
    tri = torch.stack([batch_hard_triplet(torch.cat([emb[a], emb[b]]), both, weights.triplet_margin)
                       for a, b in pairs]).mean()
    if use_cqc and net.block is not None:
        cq = emb
        if cqc_scale is not None:
            cq = {k: cqc_scale * F.normalize(v, dim=1) for k, v in emb.items()}
        cqc = cqc_total(center_table(cq, labels), weights.alpha)
    else:
        cqc = lsce.new_zeros(())
    parts = {"lsce": lsce, "tri": tri, "cqc": cqc}
    parts["total"] = total_loss(parts, weights)
    return parts


def train_step(net: MRCNNet, x_v: torch.Tensor, x_n: torch.Tensor, labels: torch.Tensor,
               weights: LossWeights, optimizer: torch.optim.Optimizer, use_cqc: bool = True,
               id_branches: Optional[Sequence[str]] = None,
               cqc_scale: Optional[float] = None) -> dict[str, float]:
    net.train()
    parts = compute_losses(net, x_v, x_n, labels, weights, use_cqc, id_branches, cqc_scale)
    if not torch.isfinite(parts["total"]):
        stats = {
            "x_v": (float(x_v.mean()), float(x_v.std())),
            "x_n": (float(x_n.mean()), float(x_n.std())),
            "labels": labels.tolist(),
            "parts": {k: float(v.detach()) for k, v in parts.items()},
        }
        raise TrainingError(f"non-finite loss; batch stats: {json.dumps(stats)}")
    optimizer.zero_grad(set_to_none=True)
    parts["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()}


class BatchLoader:
    """Turns PK index batches into augmented tensors with contiguous training labels."""

    def __init__(self, dataset: ReIDDataset, use_augment: bool, rng: np.random.Generator,
                 aug: Optional[AugmentConfig] = None):
        self.dataset = dataset
        self.use_augment = use_augment
        self.rng = rng
        if aug is None:
            # in-memory (synthetic) images keep their size; files go to the standard 288x128
            aug = AugmentConfig() if dataset.images is None else AugmentConfig(size=tuple(dataset.images.shape[2:]))
        self.aug = aug
        self.label_of = {int(pid): i for i, pid in enumerate(dataset.unique_identities())}

    @property
    def num_classes(self) -> int:
        return len(self.label_of)

    def images(self, idx: np.ndarray) -> torch.Tensor:
        imgs = [self.dataset.image(int(i)) for i in idx]
        if self.use_augment:
            imgs = [augment(im, self.aug, self.rng) for im in imgs]
        else:
            imgs = [resize(im, self.aug.size) for im in imgs]
        return torch.from_numpy(np.stack(imgs).astype(np.float32))

    def __call__(self, batch: PKBatch):
        labels = torch.tensor([self.label_of[int(p)] for p in batch.labels])
        return self.images(batch.vis), self.images(batch.nir), labels


def latest_checkpoint(directory) -> Optional[Path]:
    found = sorted(Path(directory).glob("epoch_*.pt"))
    return found[-1] if found else None


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train(net: MRCNNet, dataset: ReIDDataset, cfg: TrainConfig, ablation: AblationConfig,
          out_dir=None, resume: bool = True) -> list[dict]:
    """Run ``cfg.schedule.total_epochs`` epochs; returns the per-epoch metric records.

    With ``out_dir`` set, writes ``metrics.jsonl`` and checkpoints, and resumes from
    the newest checkpoint when one exists.
    """
    if ablation.use_mrm != net.config.use_mrm or ablation.use_mcm != net.config.use_mcm:
        raise ConfigError("ablation flags disagree with the network's configuration")
    seed_everything(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    sampler = PKSampler(dataset, cfg.P, cfg.K, np.random.default_rng([cfg.seed, 12]), cfg.batches_per_epoch)
    loader = BatchLoader(dataset, cfg.augment, rng)
    optimizer = make_optimizer(net, cfg)
    records: list[dict] = []
    start = 0

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        last = latest_checkpoint(out / "checkpoints")
        if resume and last is not None:
            restored, payload = load_checkpoint(last)
            net.load_state_dict(restored.state_dict())
            optimizer.load_state_dict(payload["optimizer"])
            sampler.set_state(payload["sampler"])
            rng.bit_generator.state = payload["rng"]
            torch.set_rng_state(payload["torch_rng"])
            start = payload["epoch"] + 1
            records = payload["records"]
            log.info("resuming from epoch %d", start)
        metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    for epoch in range(start, cfg.schedule.total_epochs):
        lr = learning_rate(epoch, cfg.schedule)
        set_lr(optimizer, lr)
        sums: dict[str, float] = {}
        weights = replace(cfg.weights, lambda2=cfg.lambda2_at(epoch))
        for batch in sampler:
            x_v, x_n, labels = loader(batch)
            parts = train_step(net, x_v, x_n, labels, weights, optimizer,
                               ablation.use_cqc, cfg.id_loss_branches, cfg.cqc_scale)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        rec = {"epoch": epoch, "lr": lr, "lambda2": weights.lambda2, **{k: v / len(sampler) for k, v in sums.items()}}
        records.append(rec)
        log.info("epoch %d lr %.4g loss %.4f (lsce %.4f tri %.4f cqc %.4f)", epoch, lr,
                 rec["total"], rec["lsce"], rec["tri"], rec["cqc"])
        if out is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            final = epoch == cfg.schedule.total_epochs - 1
            if final or (epoch + 1) % cfg.checkpoint_every == 0:
                state = {
                    "optimizer": optimizer.state_dict(),
                    "sampler": sampler.state(),
                    "rng": rng.bit_generator.state,
                    "torch_rng": torch.get_rng_state(),
                    "epoch": epoch,
                    "records": records,
                    "ablation": asdict(ablation),
                }
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", net, **state)
    return records
