import json
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from mrcn.data import SyntheticSpec, generate_synthetic
from mrcn.errors import ConfigError, ContractError
from mrcn.losses import LossWeights
from mrcn.model import build_network, load_checkpoint
from mrcn.training import (
    AblationConfig,
    BatchLoader,
    ScheduleConfig,
    TrainConfig,
    TrainingError,
    compute_losses,
    learning_rate,
    make_optimizer,
    network_config,
    seed_everything,
    set_lr,
    train,
    train_step,
)

SMALL_NET = dict(toy_channels=(8, 16, 32))


@pytest.fixture(scope="module")
def small():
    spec = SyntheticSpec(num_identities=6, samples_per_identity_per_modality=4, image_size=(32, 16),
                         num_test_identities=0)
    return generate_synthetic(spec)


def small_cfg(epochs=2, **kw):
    kw.setdefault("batches_per_epoch", 3)
    return TrainConfig(schedule=ScheduleConfig().scaled(epochs), P=3, K=2, **kw)


def make_net(ablation=AblationConfig(), classes=6, seed=0):
    seed_everything(seed)
    return build_network(network_config(ablation, classes, **SMALL_NET))


def test_schedule_values():
    cases = {0: 0.01, 5: 0.055, 10: 0.1, 19: 0.1, 20: 0.01, 59: 0.01, 60: 0.001, 79: 0.001}
    for epoch, lr in cases.items():
        assert learning_rate(epoch) == pytest.approx(lr, abs=1e-12)
    with pytest.raises(ContractError):
        learning_rate(80)
    with pytest.raises(ConfigError):
        ScheduleConfig(warmup_epochs=0)
    with pytest.raises(ConfigError):
        ScheduleConfig(base_lr=0.0)


@given(st.integers(1, 200))
def test_scaled_schedule_keeps_shape(total):
    s = ScheduleConfig().scaled(total)
    assert s.total_epochs == total
    lrs = [learning_rate(e, s) for e in range(total)]
    assert lrs[0] == pytest.approx(0.01)
    peak = int(np.argmax(lrs))
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:], lrs[peak + 1:]))
    assert ScheduleConfig().scaled(80) == ScheduleConfig()


def test_lambda2_ramp():
    cfg = TrainConfig(cqc_warmup_epochs=10)
    assert cfg.lambda2_at(0) == 0.0
    assert cfg.lambda2_at(5) == pytest.approx(0.6)
    assert cfg.lambda2_at(10) == cfg.lambda2_at(50) == pytest.approx(1.2)
    assert TrainConfig(cqc_warmup_epochs=0).lambda2_at(0) == pytest.approx(1.2)
    with pytest.raises(ConfigError):
        TrainConfig(cqc_scale=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(P=0)


class Toy(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(3.0, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-2.0, dtype=torch.float64))

    def loss(self):
        return (self.a - 1) ** 2 + 3 * self.b ** 2 + self.a * self.b


def test_momentum_sgd_matches_hand_rolled():
    toy = Toy()
    cfg = TrainConfig(momentum=0.9, weight_decay=5e-4)
    opt = make_optimizer(toy, cfg)
    p = np.array([3.0, -2.0])
    v = np.zeros(2)
    lrs = [0.01, 0.05, 0.1, 0.1, 0.01, 0.001]
    for lr in lrs:
        set_lr(opt, lr)
        opt.zero_grad()
        toy.loss().backward()
        opt.step()
        a, b = p
        g = np.array([2 * (a - 1) + b, 6 * b + a]) + 5e-4 * p
        v = 0.9 * v + g
        p = p - lr * v
        assert np.allclose([toy.a.item(), toy.b.item()], p, rtol=0, atol=1e-12)


def batch(ds, P=3, K=2, seed=0):
    from mrcn.data import pk_sample

    loader = BatchLoader(ds, False, np.random.default_rng(0))
    return loader(pk_sample(ds, P, K, seed))


def test_zero_lr_leaves_parameters(small):
    net = make_net()
    opt = make_optimizer(net, TrainConfig())
    set_lr(opt, 0.0)
    before = [p.detach().clone() for p in net.parameters()]
    for seed in range(3):
        train_step(net, *batch(small, seed=seed), LossWeights(), opt)
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def grads(net, parts):
    net.zero_grad()
    parts["total"].backward()
    return [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in net.parameters()]


def test_cqc_off_matches_zero_weight(small):
    x_v, x_n, labels = batch(small)
    net = make_net()
    off = compute_losses(net, x_v, x_n, labels, LossWeights(), use_cqc=False)
    assert off["cqc"].item() == 0.0
    g_off = grads(net, off)
    zero = compute_losses(net, x_v, x_n, labels, replace(LossWeights(), lambda2=0.0), use_cqc=True)
    assert zero["cqc"].item() > 0.0
    assert all(torch.allclose(a, b, rtol=0, atol=1e-7) for a, b in zip(g_off, grads(net, zero)))
    base = make_net(AblationConfig.baseline())
    parts = compute_losses(base, x_v, x_n, labels, LossWeights(), use_cqc=True)
    assert parts["cqc"].item() == 0.0
    assert parts["total"].item() == pytest.approx(parts["lsce"].item() + parts["tri"].item(), rel=1e-6)


def test_non_finite_loss_reports_batch(small):
    x_v, x_n, labels = batch(small)
    x_v[0, 0, 0, 0] = float("nan")
    net = make_net(AblationConfig.baseline())
    with pytest.raises(TrainingError, match="batch stats"):
        train_step(net, x_v, x_n, labels, LossWeights(), make_optimizer(net, TrainConfig()))
    net = make_net()
    with pytest.raises(ContractError, match="non-finite"):
        train_step(net, x_v, x_n, labels, LossWeights(), make_optimizer(net, TrainConfig()))


def test_ablation_mismatch_rejected(small):
    with pytest.raises(ConfigError):
        train(make_net(), small, small_cfg(1), AblationConfig.baseline())


def test_single_epoch_run(tmp_path, small):
    records = train(make_net(), small, small_cfg(1), AblationConfig(), tmp_path)
    assert len(records) == 1
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["epoch_001.pt"]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 0
    assert set(records[0]) >= {"epoch", "lr", "lambda2", "lsce", "tri", "cqc", "total"}


def test_resume_reproduces_uninterrupted_run(tmp_path, small):
    cfg = small_cfg(3, checkpoint_every=1)
    full = train(make_net(), small, cfg, AblationConfig(), tmp_path / "a")
    b = tmp_path / "b"
    train(make_net(), small, cfg, AblationConfig(), b)
    (b / "checkpoints" / "epoch_003.pt").unlink()
    (b / "checkpoints" / "epoch_002.pt").unlink()
    resumed = train(make_net(seed=123), small, cfg, AblationConfig(), b)
    assert resumed == full
    assert (b / "metrics.jsonl").read_text() == (tmp_path / "a" / "metrics.jsonl").read_text()
    net_a, _ = load_checkpoint(tmp_path / "a" / "checkpoints" / "epoch_003.pt")
    net_b, _ = load_checkpoint(b / "checkpoints" / "epoch_003.pt")
    for (k, x), (_, y) in zip(net_a.state_dict().items(), net_b.state_dict().items()):
        assert torch.equal(x, y), k


@pytest.fixture(scope="module")
def default_train():
    return generate_synthetic(SyntheticSpec()).train()


def test_baseline_loss_drops(default_train):
    ablation = AblationConfig.baseline()
    net = build_network(network_config(ablation, 20))
    records = train(net, default_train, TrainConfig(schedule=ScheduleConfig().scaled(5)), ablation)
    assert records[-1]["total"] < records[0]["total"]
    assert all(r["cqc"] == 0.0 for r in records)


@pytest.mark.slow
def test_loss_drops_over_five_epochs_across_seeds(default_train):
    drops = 0
    for seed in range(10):
        seed_everything(seed)
        net = build_network(network_config(AblationConfig(), 20))
        cfg = TrainConfig(schedule=ScheduleConfig().scaled(5), seed=seed)
        records = train(net, default_train, cfg, AblationConfig())
        drops += records[-1]["total"] < records[0]["total"]
    assert drops >= 9
