"""Train-and-measure helpers shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from mrcn.data import ReIDDataset
from mrcn.evaluation import (
    PROTOCOLS,
    EmbeddingSet,
    RetrievalReport,
    center_constraint_rate,
    distance_histograms,
    evaluate,
    extract_branch_embeddings,
    extract_embeddings,
    modality_probe,
)
from mrcn.model import MRCNNet, build_network, param_count
from mrcn.training import AblationConfig, TrainConfig, network_config, seed_everything, train

# row order of the component ablation table
ABLATION_ROWS = (
    ("baseline", AblationConfig(False, False, False)),
    ("MRCN (w/o CQC)", AblationConfig(True, True, False)),
    ("MCM (w CQC)", AblationConfig(False, True, True)),
    ("MRM (w CQC)", AblationConfig(True, False, True)),
    ("MRCN", AblationConfig(True, True, True)),
)


@dataclass
class VariantResult:
    name: str
    ablation: AblationConfig
    reports: dict[str, RetrievalReport] = field(repr=False)
    probe_orig: float
    probe_mrm: Optional[float]
    delta: float
    constraint_rate: Optional[float]
    params: int
    records: list[dict] = field(repr=False)
    seconds: float
    net: Optional[MRCNNet] = field(default=None, repr=False)
    embeddings: Optional[EmbeddingSet] = field(default=None, repr=False)

    @property
    def rank1(self) -> float:
        """Rank-1 averaged over both retrieval directions."""
        return float(np.mean([r.rank(1) for r in self.reports.values()]))

    @property
    def mean_ap(self) -> float:
        return float(np.mean([r.map for r in self.reports.values()]))

    def row(self) -> dict:
        out = {"variant": self.name, **asdict(self.ablation), "params": self.params}
        for proto, rep in self.reports.items():
            out[f"{proto} R-1"] = rep.rank(1)
            out[f"{proto} mAP"] = rep.map
        out.update({"mean R-1": self.rank1, "mean mAP": self.mean_ap, "probe_orig": self.probe_orig,
                    "probe_mrm": self.probe_mrm, "delta": self.delta,
                    "constraint_rate": self.constraint_rate,
                    "final_loss": self.records[-1]["total"] if self.records else None,
                    "seconds": round(self.seconds, 2)})
        return out


def run_variant(name: str, train_set: ReIDDataset, test_set: ReIDDataset, ablation: AblationConfig,
                cfg: TrainConfig, net_kwargs: Optional[dict] = None, out_dir=None,
                gallery_shots: Optional[int] = 1, keep: bool = False) -> VariantResult:
    """Train one ablation variant from scratch and measure retrieval and diagnostics on ``test_set``."""
    start = time.perf_counter()
    seed_everything(cfg.seed)
    num_classes = len(train_set.unique_identities())
    net = build_network(network_config(ablation, num_classes, **(net_kwargs or {})))
    records = train(net, train_set, cfg, ablation, out_dir)
    emb = extract_embeddings(net, test_set)
    reports = {p: evaluate(emb, p, gallery_shots=gallery_shots, seed=cfg.seed) for p in PROTOCOLS}
    parts = extract_embeddings(net, test_set, parts=True)
    probe_mrm = modality_probe(parts["mrm"], seed=cfg.seed) if "mrm" in parts else None
    rate = None
    if net.block is not None and net.block.use_mcm:
        rate = center_constraint_rate(extract_branch_embeddings(net, test_set))
    return VariantResult(
        name=name,
        ablation=ablation,
        reports=reports,
        probe_orig=modality_probe(parts["orig"], seed=cfg.seed),
        probe_mrm=probe_mrm,
        delta=distance_histograms(emb).delta,
        constraint_rate=rate,
        params=param_count(net),
        records=records,
        seconds=time.perf_counter() - start,
        net=net if keep else None,
        embeddings=emb if keep else None,
    )


def run_ablation(train_set: ReIDDataset, test_set: ReIDDataset, cfg: TrainConfig, stage: int = 1,
                 net_kwargs: Optional[dict] = None, out_dir=None, rows=ABLATION_ROWS,
                 gallery_shots: Optional[int] = 1) -> list[VariantResult]:
    results = []
    for name, ablation in rows:
        ablation = replace(ablation, stage=stage)
        sub = Path(out_dir) / _slug(name) if out_dir is not None else None
        results.append(run_variant(name, train_set, test_set, ablation, cfg, net_kwargs, sub, gallery_shots))
    return results


def sweep_lambda2(values, train_set: ReIDDataset, test_set: ReIDDataset, cfg: TrainConfig,
                  ablation: AblationConfig = AblationConfig(), net_kwargs: Optional[dict] = None,
                  out_dir=None, gallery_shots: Optional[int] = 1) -> list[VariantResult]:
    results = []
    for v in values:
        run_cfg = replace(cfg, weights=replace(cfg.weights, lambda2=float(v)))
        sub = Path(out_dir) / f"lambda2_{v:g}" if out_dir is not None else None
        results.append(run_variant(f"lambda2={v:g}", train_set, test_set, ablation, run_cfg, net_kwargs,
                                   sub, gallery_shots))
    return results


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_")


def single_threaded():
    """Pin torch to one thread; determinism is only promised in this mode."""
    torch.set_num_threads(1)
