"""Report figures. Every function writes a PNG and returns its path."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mrcn.evaluation import DistanceHistograms, EmbeddingSet  # noqa: E402
from mrcn.modality_norm import Modality  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_distance_histograms(hist: DistanceHistograms, path, title: str = "") -> Path:
    """Intra- vs inter-class cross-modality distance frequencies, with both means marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        width = np.diff(hist.bins)
        intra = hist.intra_counts / max(1, hist.intra_counts.sum())
        inter = hist.inter_counts / max(1, hist.inter_counts.sum())
        ax.bar(hist.bins[:-1], intra, width, align="edge", alpha=0.6, color="tab:blue", label="intra-class")
        ax.bar(hist.bins[:-1], inter, width, align="edge", alpha=0.6, color="tab:orange", label="inter-class")
        ax.axvline(hist.intra_mean, color="tab:blue", ls="--", lw=1)
        ax.axvline(hist.inter_mean, color="tab:orange", ls="--", lw=1)
        ax.set_xlabel("cross-modality distance")
        ax.set_ylabel("frequency")
        ax.set_title(f"{title}  δ = {hist.delta:.3f}".strip())
        ax.legend()
        return _save(fig, path)


def project_2d(vectors: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    """2D projection by scikit-learn's PCA or t-SNE."""
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(vectors)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(2.0, (len(vectors) - 1) / 3))
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(vectors)
    raise ValueError(f"unknown projection {method!r}")


def plot_embedding_2d(emb: EmbeddingSet, path, method: str = "pca", title: str = "", seed: int = 0) -> Path:
    """Scatter colored by identity; circles are VIS, triangles NIR."""
    xy = project_2d(emb.vectors.astype(np.float64), method, seed)
    ids = np.unique(emb.identities)
    cmap = plt.get_cmap("tab20", max(len(ids), 1))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        for k, pid in enumerate(ids):
            for mod, marker in ((Modality.VIS, "o"), (Modality.NIR, "^")):
                sel = (emb.identities == pid) & (emb.modalities == mod)
                ax.scatter(xy[sel, 0], xy[sel, 1], s=14, marker=marker, color=cmap(k), alpha=0.8, lw=0)
        ax.scatter([], [], marker="o", color="gray", label="VIS")
        ax.scatter([], [], marker="^", color="gray", label="NIR")
        ax.legend(loc="best")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title or f"{emb.branch} ({method})")
        return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """Grouped bars of mean Rank-1 and mAP per variant."""
    names = [r["variant"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.2))
        ax.bar(x - 0.2, [r["mean R-1"] for r in rows], 0.4, label="Rank-1")
        ax.bar(x + 0.2, [r["mean mAP"] for r in rows], 0.4, label="mAP")
        ax.set_xticks(x, names, rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("score (mean of both directions)")
        ax.legend()
        return _save(fig, path)


def plot_lambda2(rows: Sequence[dict], path) -> Path:
    lam = [r["lambda2"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(lam, [r["mean R-1"] for r in rows], "o-", label="Rank-1")
        ax.plot(lam, [r["mean mAP"] for r in rows], "s-", label="mAP")
        ax.set_xlabel("λ2")
        ax.set_ylabel("score")
        ax.legend()
        return _save(fig, path)


def plot_loss_curves(records: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for key in ("total", "lsce", "tri", "cqc"):
            ax.plot(epochs, [r[key] for r in records], label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)
