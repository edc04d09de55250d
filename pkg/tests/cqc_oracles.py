"""Hand-evaluated CQC cases and a generator of non-degenerate random center tables."""

import numpy as np
import torch

from mrcn.losses import CenterTable

BRANCHES = ("v", "n", "v_plus", "n_plus", "v_minus", "n_minus")


def scalar_table(**values) -> CenterTable:
    """One identity, 1-D centers."""
    centers = {k: torch.tensor([[float(v)]], dtype=torch.float64) for k, v in values.items()}
    return CenterTable(torch.tensor([0]), centers)


def hinge_args(table: CenterTable, alpha: float) -> np.ndarray:
    c = {k: table[k].detach().numpy() for k in table.centers}
    d = lambda a, b: np.linalg.norm(a - b, axis=1)  # noqa: E731
    out = []
    for vx, nx in (("v_plus", "n_plus"), ("v_minus", "n_minus")):
        out.append(alpha + d(c[vx], c["n"]) - d(c[vx], c["v"]))
        out.append(alpha + d(c[nx], c["v"]) - d(c[nx], c["n"]))
    return np.concatenate(out)


def min_pair_distance(table: CenterTable) -> float:
    ks = list(table.centers)
    return min(float(torch.linalg.vector_norm(table[a] - table[b], dim=1).min())
               for i, a in enumerate(ks) for b in ks[i + 1:])


def random_table(rng: np.random.Generator, classes: int = 4, dim: int = 8, alpha: float = 0.2,
                 margin: float = 1e-2) -> CenterTable:
    """Random centers whose hinge arguments all sit at least ``margin`` away from zero."""
    while True:
        centers = {b: torch.tensor(rng.standard_normal((classes, dim)), dtype=torch.float64) for b in BRANCHES}
        table = CenterTable(torch.arange(classes), centers)
        if np.abs(hinge_args(table, alpha)).min() >= margin and min_pair_distance(table) > 0.1:
            return table


def reference_cqc(table: CenterTable, alpha: float) -> float:
    """Straight-line loop over identities, in plain floats."""
    total = 0.0
    for i in range(table.num_classes):
        c = {k: table[k][i].detach().numpy() for k in table.centers}
        d = lambda a, b: float(np.sqrt(((a - b) ** 2).sum()))  # noqa: E731
        for vx, nx in (("v_plus", "n_plus"), ("v_minus", "n_minus")):
            if vx not in c:
                continue
            total += max(0.0, alpha + d(c[vx], c["n"]) - d(c[vx], c["v"]))
            total += max(0.0, alpha + d(c[nx], c["v"]) - d(c[nx], c["n"]))
    return total


def finite_difference_gradient(fn, table: CenterTable, h: float = 1e-4) -> dict:
    grads = {}
    for k, t in table.centers.items():
        g = torch.zeros_like(t)
        flat, gflat = t.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            up = float(fn(table))
            flat[i] = old - h
            down = float(fn(table))
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[k] = g
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(a - b) / max(float(torch.linalg.vector_norm(b)), 1e-12))
