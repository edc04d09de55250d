import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from mrcn.data import SyntheticSpec, generate_synthetic
from mrcn.errors import ContractError
from mrcn.evaluation import (
    EmbeddingSet,
    center_constraint_rate,
    cmc_map,
    distance_histograms,
    evaluate,
    export_embeddings,
    extract_branch_embeddings,
    extract_embeddings,
    gallery_subset,
    modality_probe,
    read_embeddings,
)
from mrcn.model import NetworkConfig, build_network
from mrcn.modality_norm import Modality
from retrieval_oracle import brute_force_cmc_map

VIS, NIR = int(Modality.VIS), int(Modality.NIR)


def emb(vectors, ids, mod, branch="test"):
    vectors = np.asarray(vectors, dtype=np.float64)
    return EmbeddingSet(vectors, ids, np.full(len(vectors), mod), branch)


@st.composite
def retrieval_case(draw):
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    nq, ng = draw(st.integers(1, 12)), draw(st.integers(1, 50))
    dim = draw(st.integers(1, 6))
    n_ids = draw(st.integers(1, 8))
    # a coarse grid produces plenty of exact distance ties
    coarse = draw(st.booleans())
    make = (lambda n: rng.integers(-2, 3, (n, dim)).astype(float)) if coarse else \
        (lambda n: rng.standard_normal((n, dim)))
    gid = rng.integers(0, n_ids, ng)
    qid = np.concatenate([[gid[0]], rng.integers(0, n_ids + 1, nq - 1)])
    return emb(make(nq), qid, NIR), emb(make(ng), gid, VIS)


@given(retrieval_case())
def test_cmc_map_matches_brute_force(case):
    q, g = case
    rep = cmc_map(q, g)
    cmc, m_ap = brute_force_cmc_map(q.vectors, q.identities, g.vectors, g.identities)
    assert np.abs(rep.cmc - np.array(cmc)).max() <= 1e-12
    assert abs(rep.map - m_ap) <= 1e-12
    assert np.all(np.diff(rep.cmc) >= 0) and rep.cmc[-1] == 1.0
    assert rep.num_queries + len(rep.excluded_queries) == len(q)


@given(retrieval_case(), st.integers(0, 2**31))
def test_orthogonal_invariance(case, seed):
    q, g = case
    dim = q.dim
    R = ortho_group.rvs(dim, random_state=seed) if dim > 1 else np.array([[-1.0]])
    a = cmc_map(q, g)
    b = cmc_map(emb(q.vectors @ R, q.identities, NIR), emb(g.vectors @ R, g.identities, VIS))
    # rotations only perturb ties at rounding level; compare on tie-free data
    d = np.linalg.norm(q.vectors[:, None] - g.vectors[None], axis=-1)
    if all(len(np.unique(np.round(row, 9))) == len(row) for row in d):
        assert np.allclose(a.cmc, b.cmc, atol=1e-12) and a.map == pytest.approx(b.map, abs=1e-12)


def test_ties_resolve_by_gallery_order():
    q = emb([[0.0]], [1], NIR)
    g = emb([[1.0], [-1.0]], [2, 1], VIS)
    rep = cmc_map(q, g)
    assert rep.cmc.tolist() == [0.0, 1.0] and rep.map == 0.5
    rep = cmc_map(q, emb([[1.0], [-1.0]], [1, 2], VIS))
    assert rep.cmc.tolist() == [1.0, 1.0] and rep.map == 1.0


def test_perfect_and_worst_retrieval():
    g = emb(np.eye(4) * 10, [0, 1, 2, 3], VIS)
    perfect = cmc_map(emb(np.eye(4) * 10 + 0.1, [0, 1, 2, 3], NIR), g)
    assert perfect.rank(1) == 1.0 and perfect.map == 1.0
    worst = cmc_map(emb([[0.0, 0.0]], [0], NIR), emb([[5.0, 0], [1, 0], [2, 0]], [0, 1, 2], VIS))
    assert worst.cmc.tolist() == [0.0, 0.0, 1.0] and worst.map == pytest.approx(1 / 3)


def test_excluded_queries_reported():
    q = emb([[0.0], [1.0], [2.0]], [0, 7, 1], NIR)
    rep = cmc_map(q, emb([[0.0], [2.0]], [0, 1], VIS))
    assert rep.excluded_queries == [1] and rep.num_queries == 2 and rep.rank(1) == 1.0
    with pytest.raises(ContractError):
        cmc_map(emb([[0.0]], [5], NIR), emb([[0.0]], [1], VIS))
    with pytest.raises(ContractError):
        cmc_map(emb([[0.0]], [1], VIS), emb([[0.0]], [1], VIS))


def test_evaluate_protocols_and_gallery_subset():
    rng = np.random.default_rng(0)
    ids = np.repeat(np.arange(5), 4)
    vis = emb(rng.standard_normal((20, 3)), ids, VIS)
    nir = emb(rng.standard_normal((20, 3)), ids, NIR)
    both = EmbeddingSet.concat([vis, nir], "test")
    one = gallery_subset(vis, 1, seed=3)
    assert sorted(one.identities.tolist()) == list(range(5))
    assert np.array_equal(gallery_subset(vis, 1, seed=3).vectors, one.vectors)
    assert len(gallery_subset(vis, 2, seed=0)) == 10 and gallery_subset(vis, None) is vis
    with pytest.raises(ContractError):
        gallery_subset(vis, 0)
    multi = evaluate(both, "nir->vis", gallery_shots=None)
    assert len(multi.cmc) == 20 and multi.protocol == "nir->vis"
    single = evaluate(both, "vis->nir", gallery_shots=1, seed=3)
    assert len(single.cmc) == 5 and single.num_queries == 20
    with pytest.raises(ContractError):
        evaluate(both, "vis->vis")


def test_histograms_hand_case():
    vis = emb([[0.0, 0.0], [4.0, 0.0]], [0, 1], VIS)
    nir = emb([[0.0, 1.0], [4.0, 1.0]], [0, 1], NIR)
    h = distance_histograms(EmbeddingSet.concat([vis, nir], "t"), bins=10)
    assert len(h.intra) == 2 and len(h.inter) == 2
    assert h.intra_counts.sum() == 2 and h.inter_counts.sum() == 2
    assert h.intra_mean == pytest.approx(1.0) and h.inter_mean == pytest.approx(np.sqrt(17))
    same = emb(np.ones((4, 3)), [0, 0, 1, 1], VIS)
    h0 = distance_histograms(EmbeddingSet.concat([same, emb(np.ones((4, 3)), [0, 0, 1, 1], NIR)], "t"))
    assert h0.delta == 0.0
    with pytest.raises(ContractError):
        distance_histograms(EmbeddingSet.concat([emb([[0.0]], [0], VIS), emb([[1.0]], [0], NIR)], "t"))


def test_probe_extremes():
    rng = np.random.default_rng(0)
    ids = np.repeat(np.arange(20), 10)
    base = rng.standard_normal((200, 16))
    offset = np.zeros(16)
    offset[0] = 6.0
    aligned = EmbeddingSet.concat([emb(base, ids, VIS), emb(base + offset, ids, NIR)], "t")
    assert modality_probe(aligned) >= 0.99
    iid = EmbeddingSet.concat([emb(base, ids, VIS), emb(rng.standard_normal((200, 16)), ids, NIR)], "t")
    assert abs(modality_probe(iid) - 0.5) <= 0.1
    with pytest.raises(ContractError):
        modality_probe(emb(base, ids, VIS))


def test_center_constraint_rate_counts():
    ids = np.array([0, 0, 1, 1])
    v = emb(np.array([[0.0], [0.0], [10.0], [10.0]]), ids, VIS, "v")
    n = emb(np.array([[4.0], [4.0], [14.0], [14.0]]), ids, NIR, "n")
    comp = emb(np.array([[3.0], [3.0], [1.0 + 10], [1.0 + 10]]), ids, VIS, "v_minus")
    assert center_constraint_rate({"v": v, "n": n, "v_minus": comp}) == 0.5


@pytest.mark.parametrize("width", [4, 8])
def test_export_round_trip(tmp_path, width):
    rng = np.random.default_rng(1)
    e = EmbeddingSet(rng.standard_normal((100, 7)), rng.integers(0, 2**40, 100), rng.integers(0, 2, 100), "orig")
    back = read_embeddings(export_embeddings(e, tmp_path / "e.bin", width))
    assert len(back) == 100 and back.branch == "orig"
    assert np.array_equal(back.identities, e.identities) and np.array_equal(back.modalities, e.modalities)
    expected = e.vectors.astype(np.float32) if width == 4 else e.vectors
    assert np.array_equal(back.vectors, expected)
    size = (tmp_path / "e.bin").stat().st_size
    header = size - 100 * (8 + 1 + 7 * width)
    assert 12 < header < 200


def test_export_empty_and_errors(tmp_path):
    e = EmbeddingSet(np.zeros((0, 5)), [], [])
    back = read_embeddings(export_embeddings(e, tmp_path / "empty.bin"))
    assert len(back) == 0 and back.dim == 5
    with pytest.raises(ContractError):
        export_embeddings(e, tmp_path / "x.bin", float_bytes=2)
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    with pytest.raises(ContractError):
        read_embeddings(tmp_path / "bad.bin")
    with pytest.raises(ContractError):
        EmbeddingSet(np.array([[np.nan]]), [0], [0])


@pytest.fixture(scope="module")
def test_split():
    spec = SyntheticSpec(num_identities=4, samples_per_identity_per_modality=3, image_size=(32, 16),
                         num_test_identities=4)
    return generate_synthetic(spec).test()


def test_extraction_shapes_and_concatenation(test_split):
    torch.manual_seed(0)
    net = build_network(NetworkConfig(toy_channels=(8, 16, 32), num_classes=4))
    full = extract_embeddings(net, test_split)
    parts = extract_embeddings(net, test_split, parts=True)
    assert full.dim == net.test_dim == 64 and len(full) == len(test_split)
    assert np.allclose(full.vectors, np.concatenate([parts["orig"].vectors, parts["mrm"].vectors], 1))
    assert np.allclose(full.vectors, extract_embeddings(net, test_split, batch_size=5).vectors, atol=1e-6)
    branches = extract_branch_embeddings(net, test_split)
    assert set(branches) == {"v", "n", "v_plus", "n_plus", "v_minus", "n_minus"}
    assert all(b.dim == 32 for b in branches.values())
    base = build_network(NetworkConfig(toy_channels=(8, 16, 32), num_classes=4, use_mrm=False, use_mcm=False))
    assert extract_embeddings(base, test_split).dim == 32
