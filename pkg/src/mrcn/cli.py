"""Command-line entry point: synth-data, train, eval, ablate, sweep-lambda2, diagnose."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import platform
import sys
import traceback
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, Sequence, Union, get_args, get_origin, get_type_hints

import numpy as np
import yaml

from mrcn.errors import ConfigError, ContractError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

COMMANDS = ("synth-data", "train", "eval", "ablate", "sweep-lambda2", "diagnose")

log = logging.getLogger("mrcn")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every tunable of a run. Config files use these names as flat keys."""

    seed: int = 0
    out: Optional[str] = None  # default: runs/<command>
    dataset: str = "synthetic"  # "synthetic", a saved dataset file, or an image directory
    checkpoint: Optional[str] = None  # eval/diagnose: default is the newest under <out>/checkpoints
    # ablation
    stage: int = 1
    use_mrm: bool = True
    use_mcm: bool = True
    use_cqc: bool = True
    # loss weights
    alpha: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 1.2
    smoothing: float = 0.1
    triplet_margin: float = 0.3
    cqc_scale: Optional[float] = 2.0
    cqc_warmup_epochs: int = 10
    # optimizer and schedule; unset milestones follow the 80-epoch schedule rescaled to ``epochs``
    P: int = 4
    K: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 80
    base_lr: float = 1e-2
    peak_lr: float = 1e-1
    decay1_lr: float = 1e-2
    decay2_lr: float = 1e-3
    warmup_epochs: Optional[int] = None
    decay1_epoch: Optional[int] = None
    decay2_epoch: Optional[int] = None
    batches_per_epoch: Optional[int] = None
    checkpoint_every: int = 10
    augment: bool = True
    # network
    backbone: str = "toy"
    pretrained: bool = False
    toy_channels: tuple = (32, 64, 128)
    reduction: int = 16
    # synthetic data
    synthetic_identities: int = 20
    synthetic_test_identities: int = 10
    synthetic_samples: int = 10
    synthetic_dim: int = 32
    synthetic_offset_scale: float = 1.0
    synthetic_noise_scale: float = 0.5
    synthetic_style_jitter: float = 0.6
    synthetic_mode: str = "image"
    # image directories without train/ and test/ subfolders: this many highest ids are held out
    test_identities: Optional[int] = None
    # evaluation
    gallery_shots: Optional[int] = 1  # None keeps every gallery sample (multi-shot)
    normalize_eval: bool = False
    projection: str = "pca"  # diagnose scatter: "pca" or "tsne"
    values: tuple = (0.4, 0.8, 1.2, 1.6)  # sweep-lambda2

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


_HINTS = get_type_hints(RunConfig)


def _coerce(key: str, value: Any) -> Any:
    hint = _HINTS[key]
    optional = get_origin(hint) is Union and type(None) in get_args(hint)
    base = next(a for a in get_args(hint) if a is not type(None)) if optional else hint
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} may not be null")
    if base is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    if base is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if base is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        cast = int if key == "toy_channels" else float
        try:
            return tuple(cast(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} has a non-numeric entry: {value!r}") from None
    raise AssertionError(f"unhandled type for {key}")


def resolve_config(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Built-in defaults, then the config file, then command-line overrides."""
    known = {f.name for f in fields(RunConfig)}
    merged: dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged.update({k: _coerce(k, v) for k, v in source.items()})
    return RunConfig(**merged)


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    try:
        data = yaml.safe_load(text)  # YAML is a superset of JSON
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"{path}: config must be a flat mapping of key: value")
    return data


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="flat YAML or JSON file of config keys")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (default runs/<command>)")
    g.add_argument("--dataset", help="'synthetic', a saved dataset file, or an image directory")
    g.add_argument("--stage", type=int, choices=range(5), metavar="{0..4}")
    g.add_argument("--no-mrm", dest="use_mrm", action="store_const", const=False)
    g.add_argument("--no-mcm", dest="use_mcm", action="store_const", const=False)
    g.add_argument("--no-cqc", dest="use_cqc", action="store_const", const=False)
    g.add_argument("--lambda2", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--checkpoint", help="eval/diagnose: checkpoint file")
    g.add_argument("--values", help="sweep-lambda2: comma-separated values")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (YAML-parsed value); repeatable")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mrcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-data": "write a synthetic dataset file",
        "train": "train one model and write checkpoints plus a metrics log",
        "eval": "retrieval metrics of a checkpoint on the test split",
        "ablate": "train baseline / MRCN w/o CQC / MCM / MRM / MRCN and tabulate",
        "sweep-lambda2": "train full MRCN for each lambda2 value and tabulate",
        "diagnose": "distance histograms, modality probes and 2D embedding plots of a checkpoint",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


_FLAG_KEYS = ("seed", "out", "dataset", "stage", "use_mrm", "use_mcm", "use_cqc", "lambda2", "alpha",
              "epochs", "checkpoint", "values")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    return resolve_config(file_values, overrides)


# ---------------------------------------------------------------------------
# config -> library objects


def schedule_config(cfg: RunConfig):
    from mrcn.training import ScheduleConfig

    base = ScheduleConfig(base_lr=cfg.base_lr, peak_lr=cfg.peak_lr, decay1_lr=cfg.decay1_lr,
                          decay2_lr=cfg.decay2_lr).scaled(cfg.epochs)
    milestones = {k: getattr(cfg, k) for k in ("warmup_epochs", "decay1_epoch", "decay2_epoch")
                  if getattr(cfg, k) is not None}
    return dataclasses.replace(base, **milestones)


def train_config(cfg: RunConfig):
    from mrcn.losses import LossWeights
    from mrcn.training import TrainConfig

    weights = LossWeights(alpha=cfg.alpha, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                          smoothing=cfg.smoothing, triplet_margin=cfg.triplet_margin)
    return TrainConfig(schedule=schedule_config(cfg), weights=weights, P=cfg.P, K=cfg.K,
                       momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed,
                       augment=cfg.augment, batches_per_epoch=cfg.batches_per_epoch,
                       checkpoint_every=cfg.checkpoint_every, cqc_scale=cfg.cqc_scale,
                       cqc_warmup_epochs=cfg.cqc_warmup_epochs)


def ablation_config(cfg: RunConfig):
    from mrcn.training import AblationConfig

    return AblationConfig(cfg.use_mrm, cfg.use_mcm, cfg.use_cqc, cfg.stage)


def net_kwargs(cfg: RunConfig) -> dict:
    return {"backbone": cfg.backbone, "pretrained": cfg.pretrained, "toy_channels": cfg.toy_channels,
            "reduction": cfg.reduction, "stage": cfg.stage}


def synthetic_spec(cfg: RunConfig):
    from mrcn.data import SyntheticSpec

    return SyntheticSpec(num_identities=cfg.synthetic_identities,
                         samples_per_identity_per_modality=cfg.synthetic_samples,
                         id_signal_dim=cfg.synthetic_dim, modality_offset_scale=cfg.synthetic_offset_scale,
                         noise_scale=cfg.synthetic_noise_scale, seed=cfg.seed, mode=cfg.synthetic_mode,
                         num_test_identities=cfg.synthetic_test_identities,
                         style_jitter=cfg.synthetic_style_jitter)


def load_data(cfg: RunConfig):
    """Return ``(train_split, test_split)`` for the configured dataset."""
    from mrcn.data import TEST, LayoutConfig, generate_synthetic, load_dataset, load_directory

    if cfg.dataset == "synthetic":
        ds = generate_synthetic(synthetic_spec(cfg))
    else:
        path = Path(cfg.dataset)
        if not path.exists():
            raise ConfigError(f"--dataset {cfg.dataset}: no such file or directory")
        if path.is_file():
            ds = load_dataset(path)
        elif (path / "train").is_dir() and (path / "test").is_dir():
            return load_directory(path / "train"), load_directory(path / "test")
        else:
            ds = load_directory(path)
            ids = ds.unique_identities()
            n_test = cfg.test_identities if cfg.test_identities is not None else len(ids) // 2
            if not 0 < n_test < len(ids):
                raise ConfigError(f"test_identities must lie in (0, {len(ids)})")
            held = ids[len(ids) - n_test:]
            ds.split = np.where(np.isin(ds.identities, held), TEST, 0).astype(np.int8)
    if not ds.image_mode:
        raise ConfigError("training and evaluation need image data (synthetic_mode: image)")
    train_set, test_set = ds.train(), ds.test()
    if len(train_set) == 0 or len(test_set) == 0:
        raise ConfigError("dataset needs both a train and a test split")
    return train_set, test_set


# ---------------------------------------------------------------------------
# output helpers


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def write_table(rows: Sequence[dict], out: Path, stem: str, columns: Sequence[str]) -> str:
    """Writes ``<stem>.txt`` (aligned), ``<stem>.csv`` and ``<stem>.jsonl``; returns the text table."""
    text = format_table(rows, columns)
    (out / f"{stem}.txt").write_text(text + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / f"{stem}.csv").write_text(buf.getvalue())
    (out / f"{stem}.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return text


def key_values(d: dict) -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else json.dumps(v) if isinstance(v, (list, dict)) else str(v)
    return "\n".join(f"{k} = {fmt(v)}" for k, v in d.items())


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: RunConfig) -> Path:
    import torch

    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
        "threads": torch.get_num_threads(),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _emit(text: str):
    print(text, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg: RunConfig, out: Path) -> int:
    from mrcn.data import generate_synthetic, save_dataset

    ds = generate_synthetic(synthetic_spec(cfg))
    path = save_dataset(ds, out / "dataset.mrcnds")
    summary = {"path": str(path), "samples": len(ds), "identities": int(len(ds.unique_identities())),
               "train_samples": len(ds.train()), "test_samples": len(ds.test()),
               "shape": list(ds.images.shape[1:])}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(key_values(summary))
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from mrcn.model import build_network, param_count
    from mrcn.plotting import plot_loss_curves
    from mrcn.training import network_config, seed_everything, train

    train_set, _ = load_data(cfg)
    tcfg, abl = train_config(cfg), ablation_config(cfg)
    seed_everything(cfg.seed)
    net = build_network(network_config(abl, len(train_set.unique_identities()), **net_kwargs(cfg)))
    records = train(net, train_set, tcfg, abl, out)
    final = records[-1]
    report = {"params": param_count(net), "epochs": len(records),
              **{f"final_{k}": final[k] for k in ("total", "lsce", "tri", "cqc")},
              "initial_total": records[0]["total"]}
    (out / "train_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plot_loss_curves(records, out / "loss_curves.png")
    _emit(key_values(report))
    return EXIT_OK


def _load_net(cfg: RunConfig, out: Path):
    from mrcn.model import load_checkpoint
    from mrcn.training import latest_checkpoint

    path = Path(cfg.checkpoint) if cfg.checkpoint else latest_checkpoint(out / "checkpoints")
    if path is None or not path.is_file():
        raise ConfigError(f"no checkpoint found (pass --checkpoint or train into {out} first)")
    net, _ = load_checkpoint(path)
    return net, path


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    from mrcn.evaluation import PROTOCOLS, evaluate, export_embeddings, extract_embeddings

    net, ckpt = _load_net(cfg, out)
    _, test_set = load_data(cfg)
    emb = extract_embeddings(net, test_set)
    export_embeddings(emb, out / "test_embeddings.mrcnemb")
    rows, blocks = [], []
    for proto in PROTOCOLS:
        rep = evaluate(emb, proto, cfg.normalize_eval, cfg.gallery_shots, cfg.seed)
        rows.append(rep.summary())
        blocks.append(f"[{proto}]\n{rep.to_text()}")
        with open(out / f"cmc_{proto.replace('->', '_to_')}.csv", "w") as fh:
            fh.write("rank,cmc\n" + "".join(f"{k + 1},{v:.10g}\n" for k, v in enumerate(rep.cmc)))
    text = f"checkpoint = {ckpt}\n" + "\n".join(blocks)
    (out / "report.txt").write_text(text + "\n")
    (out / "retrieval.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    _emit(text)
    return EXIT_OK


TABLE_COLUMNS = ("variant", "params", "vis->nir R-1", "vis->nir mAP", "nir->vis R-1", "nir->vis mAP",
                 "mean R-1", "mean mAP", "probe_orig", "probe_mrm", "delta", "constraint_rate")


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    from mrcn.experiments import run_ablation
    from mrcn.plotting import plot_ablation

    train_set, test_set = load_data(cfg)
    results = run_ablation(train_set, test_set, train_config(cfg), cfg.stage, net_kwargs(cfg),
                           out / "variants", gallery_shots=cfg.gallery_shots)
    rows = [r.row() for r in results]
    text = write_table(rows, out, "ablation", TABLE_COLUMNS)
    plot_ablation(rows, out / "ablation.png")
    _emit(text)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    from mrcn.experiments import sweep_lambda2
    from mrcn.plotting import plot_lambda2

    if not cfg.values:
        raise ConfigError("--values needs at least one lambda2 value")
    train_set, test_set = load_data(cfg)
    results = sweep_lambda2(cfg.values, train_set, test_set, train_config(cfg), ablation_config(cfg),
                            net_kwargs(cfg), out / "variants", cfg.gallery_shots)
    rows = [{"lambda2": v, **r.row()} for v, r in zip(cfg.values, results)]
    text = write_table(rows, out, "sweep_lambda2", ("lambda2",) + TABLE_COLUMNS[1:])
    plot_lambda2(rows, out / "sweep_lambda2.png")
    _emit(text)
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, out: Path) -> int:
    from mrcn.evaluation import (
        center_constraint_rate,
        distance_histograms,
        export_embeddings,
        extract_branch_embeddings,
        extract_embeddings,
        modality_probe,
    )
    from mrcn.plotting import plot_distance_histograms, plot_embedding_2d

    net, ckpt = _load_net(cfg, out)
    _, test_set = load_data(cfg)
    emb = extract_embeddings(net, test_set)
    parts = extract_embeddings(net, test_set, parts=True)
    hist = distance_histograms(emb)
    plot_distance_histograms(hist, out / "distances_test_features.png", "test features")
    plot_embedding_2d(emb, out / f"embedding_{cfg.projection}.png", cfg.projection, seed=cfg.seed)
    export_embeddings(emb, out / "test_embeddings.mrcnemb")
    rows = []
    for name, part in parts.items():
        h = distance_histograms(part)
        plot_distance_histograms(h, out / f"distances_{name}.png", f"{name} branch")
        export_embeddings(part, out / f"{name}_embeddings.mrcnemb")
        rows.append({"features": name, "probe_accuracy": modality_probe(part, seed=cfg.seed),
                     "intra_mean": h.intra_mean, "inter_mean": h.inter_mean, "delta": h.delta})
    rows.append({"features": "test (concat)", "probe_accuracy": modality_probe(emb, seed=cfg.seed),
                 "intra_mean": hist.intra_mean, "inter_mean": hist.inter_mean, "delta": hist.delta})
    text = f"checkpoint = {ckpt}\n" + write_table(
        rows, out, "diagnostics", ("features", "probe_accuracy", "intra_mean", "inter_mean", "delta"))
    if net.block is not None and net.block.use_mcm:
        rate = center_constraint_rate(extract_branch_embeddings(net, test_set))
        (out / "constraint_rate.json").write_text(json.dumps({"v_minus_nearer_nir": rate}) + "\n")
        text += f"\ncompensated-center constraint rate = {rate:.4f}"
    _emit(text)
    return EXIT_OK


HANDLERS = {"synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep-lambda2": cmd_sweep, "diagnose": cmd_diagnose}


def _setup_logging(out: Path, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    import torch

    torch.set_num_threads(1)
    out = Path(cfg.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    handler = _setup_logging(out, args.verbose)
    try:
        write_manifest(out, args.command, argv, cfg)
        return HANDLERS[args.command](cfg, out)
    except ConfigError as e:
        log.error("config error: %s", e)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, RuntimeError, OSError, ValueError) as e:
        log.error("%s failed: %s\n%s", args.command, e, traceback.format_exc())
        print(f"error: {type(e).__name__}: {e} (details in {out / 'run.log'})", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
