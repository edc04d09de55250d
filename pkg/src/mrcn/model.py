"""Backbones, MRCN insertion, and checkpoint serialization."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from mrcn.attention import DEFAULT_REDUCTION
from mrcn.block import MRCNBlock
from mrcn.errors import ConfigError
from mrcn.modality_norm import DEFAULT_EPS, FeatureMap, Modality


@dataclass
class NetworkConfig:
    backbone: str = "toy"  # "toy" or "resnet50"
    stage: int = 1
    use_mrm: bool = True
    use_mcm: bool = True
    num_classes: int = 20
    toy_channels: tuple[int, ...] = (32, 64, 128)
    in_channels: int = 3
    reduction: int = DEFAULT_REDUCTION
    eps: float = DEFAULT_EPS
    pretrained: bool = False
    bnneck: bool = True

    def __post_init__(self):
        self.toy_channels = tuple(self.toy_channels)
        if self.backbone not in ("toy", "resnet50"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        n_stages = len(self.toy_channels) if self.backbone == "toy" else 5
        if not 0 <= self.stage < n_stages:
            raise ConfigError(
                f"stage {self.stage} is invalid for the {self.backbone} backbone (0..{n_stages - 1})")

    @property
    def has_block(self) -> bool:
        return self.use_mrm or self.use_mcm


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def toy_stages(channels: tuple[int, ...], in_channels: int = 3) -> list[nn.Module]:
    stem = nn.Sequential(
        nn.Conv2d(in_channels, channels[0], 3, 2, 1, bias=False),
        nn.BatchNorm2d(channels[0]),
        nn.ReLU(inplace=True),
    )
    stages = [stem]
    for cin, cout in zip(channels[:-1], channels[1:]):
        stages.append(BasicBlock(cin, cout))
    return stages


def resnet50_stages(pretrained: bool = False) -> tuple[list[nn.Module], list[int]]:
    from torchvision.models import ResNet50_Weights, resnet50

    net = resnet50(weights=ResNet50_Weights.DEFAULT if pretrained else None)
    # last stride 1 keeps a usable spatial extent at 288x128
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return [stem, net.layer1, net.layer2, net.layer3, net.layer4], [64, 256, 512, 1024, 2048]


class MRCNNet(nn.Module):
    """Backbone with an optional MRCN block after ``config.stage``.

    The stages after the block are shared by every branch; all branches are
    run through them as one concatenated batch.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        if config.backbone == "toy":
            stages = toy_stages(config.toy_channels, config.in_channels)
            widths = list(config.toy_channels)
        else:
            stages, widths = resnet50_stages(config.pretrained)
        s = config.stage
        self.head = nn.Sequential(*stages[: s + 1])
        self.tail = nn.Sequential(*stages[s + 1:])
        self.block_channels = widths[s]
        self.embed_dim = widths[-1]
        self.block: Optional[MRCNBlock] = None
        if config.has_block:
            self.block = MRCNBlock(widths[s], config.use_mrm, config.use_mcm,
                                   config.reduction, config.eps)
        # BN bottleneck between the metric embedding and the classifier
        self.neck = nn.BatchNorm1d(self.embed_dim, affine=False) if config.bnneck else nn.Identity()
        self.classifier = nn.Linear(self.embed_dim, config.num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        return self.tail(x).mean(dim=(2, 3))

    def forward(self, x_v: torch.Tensor, x_n: torch.Tensor) -> dict[str, torch.Tensor]:
        """Training forward on aligned VIS/NIR batches; returns pooled embeddings per branch."""
        n = x_v.shape[0]
        feats = self.head(torch.cat([x_v, x_n]))
        f_v = FeatureMap(feats[:n], Modality.VIS)
        f_n = FeatureMap(feats[n:], Modality.NIR)
        if self.block is None:
            names, maps = ["v", "n"], [f_v.data, f_n.data]
        else:
            branches = self.block.forward_pair(f_v, f_n)
            names = branches.names()
            maps = [fm.data for _, fm in branches.items()]
        pooled = self.pool(torch.cat(maps))
        return dict(zip(names, pooled.split(n)))

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.neck(emb))

    def branch_embeddings(self, x: torch.Tensor, modality: Modality) -> dict[str, torch.Tensor]:
        """Single-modality inference: the original branch and, when MRM is on, the restituted one."""
        feats = FeatureMap(self.head(x), modality)
        out = {"orig": self.pool(feats.data)}
        if self.block is not None and self.block.use_mrm:
            out["mrm"] = self.pool(self.block.restitute(feats).data)
        return out

    def embed(self, x: torch.Tensor, modality: Modality) -> torch.Tensor:
        parts = self.branch_embeddings(x, modality)
        if "mrm" in parts:
            return torch.cat([parts["orig"], parts["mrm"]], dim=1)
        return parts["orig"]

    @property
    def test_dim(self) -> int:
        return 2 * self.embed_dim if (self.block is not None and self.block.use_mrm) else self.embed_dim


def build_network(config: NetworkConfig) -> MRCNNet:
    return MRCNNet(config)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, net: MRCNNet, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"network_config": asdict(net.config), "state_dict": net.state_dict()}
    payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[MRCNNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    net = MRCNNet(NetworkConfig(**payload["network_config"]))
    net.load_state_dict(payload["state_dict"])
    return net, payload
