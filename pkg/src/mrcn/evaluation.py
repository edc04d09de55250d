"""Test-time feature extraction, CMC/mAP retrieval metrics, and disentanglement diagnostics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from mrcn.data import AugmentConfig, ReIDDataset, resize
from mrcn.errors import ContractError
from mrcn.modality_norm import Modality

PROTOCOLS = {"vis->nir": (Modality.VIS, Modality.NIR), "nir->vis": (Modality.NIR, Modality.VIS)}


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray
    branch: str = "test"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.vectors), -1)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.modalities = np.asarray(self.modalities, dtype=np.int8)
        if not (len(self.vectors) == len(self.identities) == len(self.modalities)):
            raise ContractError("embedding set columns have unequal lengths")
        if not np.isfinite(self.vectors).all():
            raise ContractError("embedding set contains non-finite vectors")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def where(self, mask) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[mask], self.identities[mask], self.modalities[mask], self.branch)

    def of_modality(self, modality: Modality) -> "EmbeddingSet":
        return self.where(self.modalities == modality)

    @classmethod
    def concat(cls, sets: list["EmbeddingSet"], branch: str) -> "EmbeddingSet":
        return cls(np.concatenate([s.vectors for s in sets]), np.concatenate([s.identities for s in sets]),
                   np.concatenate([s.modalities for s in sets]), branch)


# ---------------------------------------------------------------------------
# extraction


def _batches(dataset: ReIDDataset, idx: np.ndarray, size: Optional[tuple[int, int]], batch_size: int):
    if size is None and dataset.images is None:
        size = AugmentConfig().size  # files on disk may differ in size
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        imgs = [dataset.image(int(i)) for i in chunk]
        if size is not None:
            imgs = [resize(im, size) for im in imgs]
        yield chunk, torch.from_numpy(np.stack(imgs).astype(np.float32))


@torch.no_grad()
def extract_embeddings(net, dataset: ReIDDataset, batch_size: int = 128,
                       size: Optional[tuple[int, int]] = None, parts: bool = False):
    """Test features: ``concat(original, restituted)`` per sample (original only without MRM).

    With ``parts=True`` returns a dict of per-part EmbeddingSets instead.
    """
    if dataset.modalities is None:
        raise ContractError("samples need a modality tag")
    net.eval()
    out: dict[str, list] = {}
    order = []
    for mod in (Modality.VIS, Modality.NIR):
        idx = np.flatnonzero(dataset.modalities == mod)
        for chunk, x in _batches(dataset, idx, size, batch_size):
            for name, emb in net.branch_embeddings(x, mod).items():
                out.setdefault(name, []).append(emb.numpy())
            order.append(chunk)
    order = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
    ids, mods = dataset.identities[order], dataset.modalities[order]
    sets = {k: EmbeddingSet(np.concatenate(v), ids, mods, k) for k, v in out.items()}
    if parts:
        return sets
    vec = np.concatenate([sets[k].vectors for k in ("orig", "mrm") if k in sets], axis=1)
    return EmbeddingSet(vec, ids, mods, "test")


def pair_indices(dataset: ReIDDataset) -> tuple[np.ndarray, np.ndarray]:
    """Match the j-th VIS and j-th NIR sample of every identity (truncated to the shorter list)."""
    vis, nir = [], []
    for pid in dataset.unique_identities():
        own = dataset.identities == pid
        v = np.flatnonzero(own & (dataset.modalities == Modality.VIS))
        n = np.flatnonzero(own & (dataset.modalities == Modality.NIR))
        k = min(len(v), len(n))
        vis.append(v[:k])
        nir.append(n[:k])
    return np.concatenate(vis), np.concatenate(nir)


@torch.no_grad()
def extract_branch_embeddings(net, dataset: ReIDDataset, batch_size: int = 64,
                              size: Optional[tuple[int, int]] = None) -> dict[str, EmbeddingSet]:
    """All training-time branches on paired samples, in inference mode (diagnostics only)."""
    net.eval()
    vis, nir = pair_indices(dataset)
    out: dict[str, list] = {}
    for start in range(0, len(vis), batch_size):
        iv, inn = vis[start:start + batch_size], nir[start:start + batch_size]
        (_, xv), = _batches(dataset, iv, size, len(iv))
        (_, xn), = _batches(dataset, inn, size, len(inn))
        for name, emb in net(xv, xn).items():
            out.setdefault(name, []).append(emb.numpy())
    result = {}
    for name, chunks in out.items():
        src = vis if name.startswith("v") else nir
        mod = Modality.VIS if name.startswith("v") else Modality.NIR
        result[name] = EmbeddingSet(np.concatenate(chunks), dataset.identities[src],
                                    np.full(len(src), int(mod)), name)
    return result


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    protocol: str = "nir->vis"
    num_queries: int = 0
    excluded_queries: list[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self, ranks=(1, 10, 20)) -> dict:
        out = {"protocol": self.protocol, "num_queries": self.num_queries,
               "excluded_queries": len(self.excluded_queries), "mAP": float(self.map)}
        for k in ranks:
            out[f"R-{k}"] = self.rank(k)
        return out

    def to_text(self, ranks=(1, 10, 20)) -> str:
        return "\n".join(f"{k} = {v:.6g}" if isinstance(v, float) else f"{k} = {v}"
                         for k, v in self.summary(ranks).items())


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.clip(d2, 0.0, None))


def _l2n(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def cmc_map(query: EmbeddingSet, gallery: EmbeddingSet, normalize: bool = False,
            protocol: Optional[str] = None) -> RetrievalReport:
    """Rank the gallery by Euclidean distance (stable on ties) for every query."""
    if len(query) and len(gallery):
        qm, gm = set(query.modalities.tolist()), set(gallery.modalities.tolist())
        if qm & gm:
            raise ContractError("query and gallery must come from opposite modalities")
    if protocol is None and len(query):
        protocol = "vis->nir" if query.modalities[0] == Modality.VIS else "nir->vis"
    qv, gv = query.vectors.astype(np.float64), gallery.vectors.astype(np.float64)
    if normalize:
        qv, gv = _l2n(qv), _l2n(gv)
    dist = distance_matrix(qv, gv)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery.identities[order] == query.identities[:, None]
    valid = matches.any(axis=1)
    excluded = np.flatnonzero(~valid).tolist()
    matches = matches[valid]
    if len(matches) == 0:
        raise ContractError("no query has a matching identity in the gallery")
    cmc = (np.cumsum(matches, axis=1) > 0).mean(axis=0)
    hits = np.cumsum(matches, axis=1)
    positions = np.arange(1, matches.shape[1] + 1)
    ap = ((hits / positions) * matches).sum(axis=1) / matches.sum(axis=1)
    return RetrievalReport(cmc, float(ap.mean()), ap, protocol or "", int(valid.sum()), excluded)


def gallery_subset(gallery: EmbeddingSet, shots: Optional[int], seed: int = 0) -> EmbeddingSet:
    """Keep ``shots`` randomly chosen samples per identity (all of them when ``shots`` is None)."""
    if shots is None:
        return gallery
    if shots < 1:
        raise ContractError("gallery shots must be >= 1")
    rng = np.random.default_rng(seed)
    keep = []
    for pid in np.unique(gallery.identities):
        idx = np.flatnonzero(gallery.identities == pid)
        keep.append(np.sort(rng.permutation(idx)[:shots]))
    mask = np.zeros(len(gallery), dtype=bool)
    if keep:
        mask[np.concatenate(keep)] = True
    return gallery.where(mask)


def evaluate(embeddings: EmbeddingSet, protocol: str = "nir->vis", normalize: bool = False,
             gallery_shots: Optional[int] = 1, seed: int = 0) -> RetrievalReport:
    """Cross-modality retrieval; single-shot gallery by default, ``gallery_shots=None`` keeps all."""
    if protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {protocol!r}")
    q_mod, g_mod = PROTOCOLS[protocol]
    gallery = gallery_subset(embeddings.of_modality(g_mod), gallery_shots, seed)
    return cmc_map(embeddings.of_modality(q_mod), gallery, normalize, protocol)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DistanceHistograms:
    intra: np.ndarray
    inter: np.ndarray
    bins: np.ndarray
    intra_counts: np.ndarray
    inter_counts: np.ndarray

    @property
    def intra_mean(self) -> float:
        return float(self.intra.mean())

    @property
    def inter_mean(self) -> float:
        return float(self.inter.mean())

    @property
    def delta(self) -> float:
        return self.inter_mean - self.intra_mean


def cross_modality_distances(vis: EmbeddingSet, nir: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    d = distance_matrix(vis.vectors.astype(np.float64), nir.vectors.astype(np.float64))
    same = vis.identities[:, None] == nir.identities[None, :]
    return d[same], d[~same]


def distance_histograms(embeddings: EmbeddingSet, bins: int = 50,
                        nir: Optional[EmbeddingSet] = None) -> DistanceHistograms:
    """Intra-/inter-class distances over every VIS x NIR pair.

    Pass ``nir`` separately to compare two branch sets (e.g. restituted VIS vs NIR).
    """
    if nir is None:
        vis, nir = embeddings.of_modality(Modality.VIS), embeddings.of_modality(Modality.NIR)
    else:
        vis = embeddings
    if len(np.union1d(vis.identities, nir.identities)) < 2:
        raise ContractError("inter-class distances need at least two identities")
    intra, inter = cross_modality_distances(vis, nir)
    if len(intra) == 0 or len(inter) == 0:
        raise ContractError("need both intra- and inter-class cross-modality pairs")
    hi = max(float(intra.max()), float(inter.max()))
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    return DistanceHistograms(intra, inter, edges, np.histogram(intra, edges)[0], np.histogram(inter, edges)[0])


def modality_probe(embeddings: EmbeddingSet, test_fraction: float = 0.5, seed: int = 0,
                   C: float = 1.0) -> float:
    """Held-out accuracy of a logistic-regression modality classifier."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    mods = embeddings.modalities
    if len(np.unique(mods)) < 2:
        raise ContractError("modality probe needs both modalities")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for m in np.unique(mods):
        idx = rng.permutation(np.flatnonzero(mods == m))
        cut = max(1, int(round(len(idx) * (1 - test_fraction))))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    scaler = StandardScaler().fit(embeddings.vectors[tr])
    clf = LogisticRegression(C=C, max_iter=2000)
    clf.fit(scaler.transform(embeddings.vectors[tr]), mods[tr])
    return float(clf.score(scaler.transform(embeddings.vectors[te]), mods[te]))


def center_constraint_rate(branches: dict[str, EmbeddingSet], compensated: str = "v_minus") -> float:
    """Fraction of identities whose compensated VIS center is nearer the NIR center than the VIS one."""
    ids = np.unique(branches["v"].identities)

    def center(name, pid):
        s = branches[name]
        return s.vectors[s.identities == pid].mean(axis=0)

    ok = 0
    for pid in ids:
        cx = center(compensated, pid)
        own, other = ("v", "n") if compensated.startswith("v") else ("n", "v")
        if np.linalg.norm(cx - center(other, pid)) < np.linalg.norm(cx - center(own, pid)):
            ok += 1
    return ok / len(ids)


# ---------------------------------------------------------------------------
# embedding dump

_EMB_MAGIC = b"MRCNEMB1"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def export_embeddings(embeddings: EmbeddingSet, path, float_bytes: int = 4) -> Path:
    """Binary dump: magic, JSON header (dim, count, float width, branch), then fixed-size records.

    Each record is ``int64 identity | uint8 modality | dim floats``.
    """
    if float_bytes not in _DTYPES:
        raise ContractError("float_bytes must be 4 or 8")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        rec = np.dtype([("id", "<i8"), ("modality", "u1"), ("vec", _DTYPES[float_bytes], (embeddings.dim,))])
        arr = np.zeros(len(embeddings), dtype=rec)
        arr["id"] = embeddings.identities
        arr["modality"] = embeddings.modalities
        arr["vec"] = embeddings.vectors
        header = json.dumps({"dim": embeddings.dim, "count": len(embeddings), "float_bytes": float_bytes,
                             "branch": embeddings.branch}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_EMB_MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes())
    except OSError as exc:
        raise ContractError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:8] != _EMB_MAGIC:
        raise ContractError(f"{path}: not an embedding dump")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    rec = np.dtype([("id", "<i8"), ("modality", "u1"), ("vec", _DTYPES[header["float_bytes"]], (header["dim"],))])
    arr = np.frombuffer(raw[12 + n:], dtype=rec, count=header["count"])
    vectors = arr["vec"].reshape(header["count"], header["dim"]).copy()
    return EmbeddingSet(vectors, arr["id"].copy(), arr["modality"].copy(), header["branch"])
