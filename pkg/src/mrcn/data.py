"""Datasets, cross-modality PK sampling, augmentation, and the synthetic generator."""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from mrcn.errors import ConfigError, ContractError
from mrcn.modality_norm import Modality

TRAIN, TEST = 0, 1


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    modality: Modality
    camera: Optional[int] = None

    def __post_init__(self):
        if self.identity < 0:
            raise ContractError(f"identity must be non-negative, got {self.identity}")
        if min(self.image.shape) < 1:
            raise ContractError("sample image has an empty dimension")


@dataclass
class ReIDDataset:
    """Column-oriented sample store.

    ``images`` is either an ``(N, 3, H, W)`` float array, an ``(N, D)`` feature
    array, or None when ``paths`` points at image files loaded on demand.
    """

    identities: np.ndarray
    modalities: np.ndarray
    cameras: np.ndarray
    images: Optional[np.ndarray] = None
    paths: Optional[list[str]] = None
    split: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.identities)
        if len(self.modalities) != n or len(self.cameras) != n:
            raise ContractError("dataset columns have unequal lengths")
        if self.images is None and self.paths is None:
            raise ContractError("dataset needs images or paths")
        if self.split is None:
            self.split = np.zeros(n, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.identities)

    @property
    def image_mode(self) -> bool:
        return self.images is None or self.images.ndim == 4

    def image(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        return read_image(self.paths[i])

    def sample(self, i: int) -> Sample:
        cam = int(self.cameras[i])
        return Sample(self.image(i), int(self.identities[i]), Modality(int(self.modalities[i])),
                      cam if cam >= 0 else None)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, mask: np.ndarray) -> "ReIDDataset":
        idx = np.flatnonzero(mask)
        return ReIDDataset(
            identities=self.identities[idx],
            modalities=self.modalities[idx],
            cameras=self.cameras[idx],
            images=None if self.images is None else self.images[idx],
            paths=None if self.paths is None else [self.paths[i] for i in idx],
            split=self.split[idx],
            meta=dict(self.meta),
        )

    def train(self) -> "ReIDDataset":
        return self.subset(self.split == TRAIN)

    def test(self) -> "ReIDDataset":
        return self.subset(self.split == TEST)

    def unique_identities(self) -> np.ndarray:
        return np.unique(self.identities)


# ---------------------------------------------------------------------------
# PK sampling


@dataclass
class PKBatch:
    """Aligned index lists: ``vis[i]`` and ``nir[i]`` share identity ``labels[i]``."""

    vis: np.ndarray
    nir: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.vis) + len(self.nir)


def _pick(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # resample with replacement only when the pool is too small
    return rng.choice(pool, size=k, replace=len(pool) < k)


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def pk_sample(dataset: ReIDDataset, P: int = 4, K: int = 4, seed=None,
              identities: Optional[Sequence[int]] = None) -> PKBatch:
    """Draw P identities, then K VIS and K NIR samples of each."""
    rng = _as_rng(seed)
    all_ids = dataset.unique_identities()
    if identities is None:
        if len(all_ids) < P:
            raise ContractError(f"dataset has {len(all_ids)} identities, need at least P={P}")
        identities = rng.choice(all_ids, size=P, replace=False)
    vis, nir, labels = [], [], []
    for pid in identities:
        own = dataset.identities == pid
        pool_v = np.flatnonzero(own & (dataset.modalities == Modality.VIS))
        pool_n = np.flatnonzero(own & (dataset.modalities == Modality.NIR))
        if len(pool_v) == 0 or len(pool_n) == 0:
            raise ContractError(f"identity {pid} lacks samples in one modality")
        vis.append(_pick(pool_v, K, rng))
        nir.append(_pick(pool_n, K, rng))
        labels.append(np.full(K, pid))
    return PKBatch(np.concatenate(vis), np.concatenate(nir), np.concatenate(labels))


class PKSampler:
    """Epoch iterator of PK batches; identities are cycled in shuffled order."""

    def __init__(self, dataset: ReIDDataset, P: int = 4, K: int = 4, seed=0,
                 batches_per_epoch: Optional[int] = None):
        self.dataset = dataset
        self.P, self.K = P, K
        self.rng = _as_rng(seed)
        self.ids = dataset.unique_identities()
        if len(self.ids) < P:
            raise ContractError(f"dataset has {len(self.ids)} identities, need at least P={P}")
        n_vis = int((dataset.modalities == Modality.VIS).sum())
        self.batches_per_epoch = batches_per_epoch or max(1, math.ceil(n_vis / (P * K)))
        self._queue: list[int] = []

    def __len__(self) -> int:
        return self.batches_per_epoch

    def _next_ids(self) -> list[int]:
        chosen: list[int] = []
        while len(chosen) < self.P:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.ids))
            pid = self._queue.pop()
            if pid not in chosen:
                chosen.append(pid)
        return chosen

    def __iter__(self) -> Iterator[PKBatch]:
        for _ in range(self.batches_per_epoch):
            yield pk_sample(self.dataset, self.P, self.K, self.rng, identities=self._next_ids())

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "queue": [int(i) for i in self._queue]}

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        self._queue = list(state["queue"])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    size: tuple[int, int] = (288, 128)
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    erase_attempts: int = 100


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    c, h, w = image.shape
    if (h, w) == tuple(size):
        return image
    return ndimage.zoom(image, (1, size[0] / h, size[1] / w), order=1, grid_mode=True, mode="nearest")


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def erase(image: np.ndarray, rect: tuple[int, int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Replace ``image[:, top:top+h, left:left+w]`` with random values."""
    top, left, h, w = rect
    out = image.copy()
    out[:, top:top + h, left:left + w] = rng.standard_normal((image.shape[0], h, w)).astype(image.dtype)
    return out


def random_erase_rect(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator):
    height, width = shape
    for _ in range(cfg.erase_attempts):
        area = rng.uniform(*cfg.erase_area) * height * width
        aspect = rng.uniform(*cfg.erase_aspect)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < height and 0 < w < width:
            return int(rng.integers(0, height - h + 1)), int(rng.integers(0, width - w + 1)), h, w
    return None


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            flip: Optional[bool] = None, erase_rect=None) -> np.ndarray:
    """Resize, random horizontal flip, random erasing. ``flip``/``erase_rect`` force the random choices."""
    if image.ndim != 3 or min(image.shape) < 1:
        raise ContractError(f"augment expects a non-empty (C, H, W) image, got {image.shape}")
    out = resize(image, config.size)
    if flip is None:
        flip = rng.random() < config.flip_prob
    if flip:
        out = hflip(out)
    if erase_rect is None and rng.random() < config.erase_prob:
        erase_rect = random_erase_rect(out.shape[1:], config, rng)
    if erase_rect is not None:
        out = erase(out, erase_rect, rng)
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    num_identities: int = 20
    samples_per_identity_per_modality: int = 10
    id_signal_dim: int = 32
    modality_offset_scale: float = 1.0
    noise_scale: float = 0.5
    seed: int = 0
    mode: str = "image"
    image_size: tuple[int, int] = (64, 32)
    num_test_identities: int = 10
    style_jitter: float = 0.6  # per-sample style noise, in units of noise_scale

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        counts = (self.num_identities, self.samples_per_identity_per_modality, self.id_signal_dim)
        if min(counts) < 1 or self.num_test_identities < 0 or min(self.image_size) < 1:
            raise ConfigError("synthetic counts and image size must be >= 1")
        if min(self.modality_offset_scale, self.noise_scale, self.style_jitter) < 0:
            raise ConfigError("synthetic scales must be >= 0")
        if self.mode not in ("image", "feature"):
            raise ConfigError(f"unknown synthetic mode {self.mode!r}")


def _smooth_basis(k: int, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = size
    coarse = rng.standard_normal((k, 3, max(2, h // 8), max(2, w // 8)))
    basis = ndimage.zoom(coarse, (1, 1, h / coarse.shape[2], w / coarse.shape[3]), order=1,
                         grid_mode=True, mode="nearest")
    basis -= basis.mean(axis=(2, 3), keepdims=True)
    basis /= basis.std(axis=(1, 2, 3), keepdims=True) + 1e-12
    return basis


def generate_synthetic(spec: SyntheticSpec) -> ReIDDataset:
    """Two-modality toy data: identity latent plus a modality-global style.

    In feature mode a sample is ``z_id + s * offset_m + noise``. In image mode the
    noisy latent is rendered through a fixed smooth basis and the modality
    applies a per-channel gain and offset (scaled by ``s``), with per-sample
    jitter of that style proportional to the noise scale.
    """
    # independent streams so changing one count does not reshuffle the rest
    style_rng = np.random.default_rng([spec.seed, 1])
    basis_rng = np.random.default_rng([spec.seed, 2])
    id_rng = np.random.default_rng([spec.seed, 3])
    noise_rng = np.random.default_rng([spec.seed, 4])

    n_ids = spec.num_identities + spec.num_test_identities
    m = spec.samples_per_identity_per_modality
    s = spec.modality_offset_scale
    latents = id_rng.standard_normal((n_ids, spec.id_signal_dim))

    ids = np.repeat(np.arange(n_ids), 2 * m)
    mods = np.tile(np.repeat([Modality.VIS, Modality.NIR], m), n_ids).astype(np.int8)
    cams = np.where(mods == Modality.VIS, 1, 3).astype(np.int16)
    split = np.where(ids < spec.num_identities, TRAIN, TEST).astype(np.int8)
    z = latents[ids] + spec.noise_scale * noise_rng.standard_normal((len(ids), spec.id_signal_dim))

    if spec.mode == "feature":
        offsets = style_rng.standard_normal((2, spec.id_signal_dim))
        x = z + s * offsets[mods]
    else:
        basis = _smooth_basis(spec.id_signal_dim, spec.image_size, basis_rng)
        gain = style_rng.standard_normal((2, 3))
        bias = style_rng.standard_normal((2, 3))
        img = np.einsum("nk,kchw->nchw", z, basis) / math.sqrt(spec.id_signal_dim)
        jitter = spec.style_jitter * spec.noise_scale
        jit_g = jitter * noise_rng.standard_normal((len(ids), 3))
        jit_b = jitter * noise_rng.standard_normal((len(ids), 3))
        g = np.exp(0.5 * s * gain[mods] + jit_g)
        b = s * bias[mods] + jit_b
        x = img * g[:, :, None, None] + b[:, :, None, None]

    meta = {"synthetic_spec": asdict(spec)}
    return ReIDDataset(ids, mods, cams, images=x.astype(np.float32), split=split, meta=meta)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"MRCNDS1\n"
_ARRAYS = ("identities", "modalities", "cameras", "split", "images")


def save_dataset(dataset: ReIDDataset, path) -> Path:
    """Write a self-describing container: magic, JSON header, raw little-endian arrays."""
    if dataset.images is None:
        raise ContractError("only in-memory datasets can be serialized")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.ascontiguousarray(getattr(dataset, name)) for name in _ARRAYS}
    header = {
        "meta": dataset.meta,
        "arrays": [{"name": k, "dtype": v.dtype.newbyteorder("<").str, "shape": list(v.shape)}
                   for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in _ARRAYS:
            fh.write(arrays[k].astype(arrays[k].dtype.newbyteorder("<"), copy=False).tobytes())
    return path


def load_dataset(path) -> ReIDDataset:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ContractError(f"{path}: not a dataset container")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        cols = {}
        for entry in header["arrays"]:
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"]))
            cols[entry["name"]] = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt).reshape(entry["shape"])
    return ReIDDataset(images=cols.pop("images").copy(), meta=header["meta"],
                       **{k: v.copy() for k, v in cols.items()})


# ---------------------------------------------------------------------------
# directory loader

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
_NAME_RE = re.compile(r"^(?:cam)?(?P<camera>\d+)_(?P<index>\d+)$")


@dataclass(frozen=True)
class LayoutConfig:
    modality_dirs: tuple[str, str] = ("vis", "nir")
    extensions: tuple[str, ...] = IMAGE_EXTS
    test_identities: tuple[int, ...] = ()


def read_image(path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_directory(root, layout: LayoutConfig = LayoutConfig()) -> ReIDDataset:
    """Index ``<root>/<identity>/<vis|nir>/<camera>_<index>.<ext>``; images load lazily."""
    root = Path(root)
    if not root.is_dir():
        raise ContractError(f"{root}: not a directory")
    ids, mods, cams, paths = [], [], [], []
    for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if not id_dir.name.isdigit():
            raise ContractError(f"{id_dir}: identity directory names must be integers")
        for mod, sub in zip((Modality.VIS, Modality.NIR), layout.modality_dirs):
            mdir = id_dir / sub
            if not mdir.is_dir():
                raise ContractError(f"{mdir}: missing modality directory")
            for f in sorted(mdir.iterdir()):
                if f.suffix.lower() not in layout.extensions:
                    continue
                match = _NAME_RE.match(f.stem)
                if match is None:
                    raise ContractError(f"{f}: expected <camera>_<index>.<ext>")
                ids.append(int(id_dir.name))
                mods.append(int(mod))
                cams.append(int(match["camera"]))
                paths.append(str(f))
    if not paths:
        raise ContractError(f"{root}: no images found")
    ids_arr = np.array(ids, dtype=np.int64)
    split = np.isin(ids_arr, layout.test_identities).astype(np.int8)
    return ReIDDataset(ids_arr, np.array(mods, dtype=np.int8), np.array(cams, dtype=np.int16),
                       paths=paths, split=split, meta={"root": str(root)})
