"""PCA-score, CKA and similarity checks against independent oracles."""

import numpy as np
import pytest

from elm.analysis import (CkaMatrix, PcaScoreTable, SimilarityTable,
                          block_similarity, cka_heads, export_figure_data,
                          linear_cka, pca_score)
from elm.errors import ContractError

from oracles import cka_double_loop

RNG = np.random.default_rng(20240813)


def _rank_k_matrix(rows, d, k, rng):
    return rng.normal(size=(rows, k)) @ rng.normal(size=(k, d))


def test_pca_score_exact_rank():
    x = _rank_k_matrix(64, 8, 2, RNG)
    assert pca_score(x, tau=0.99) == 2 / 8
    y = _rank_k_matrix(64, 16, 4, RNG)
    assert pca_score(y, tau=0.99) == 4 / 16
    z = RNG.normal(size=(32, 1))
    assert pca_score(z, tau=0.99) == 1.0


def test_pca_score_full_rank_and_zero_input():
    x = RNG.normal(size=(128, 6))
    assert pca_score(x, tau=0.999999) == 1.0
    assert pca_score(np.zeros((10, 4))) == 1 / 4


def test_pca_score_scaling_invariance_and_tau_monotonicity():
    x = RNG.normal(size=(40, 10)) @ np.diag(np.linspace(3, 0.1, 10))
    assert pca_score(x, tau=0.95) == pca_score(17.3 * x, tau=0.95)
    taus = [0.5, 0.8, 0.9, 0.99]
    scores = [pca_score(x, tau=t) for t in taus]
    assert all(a <= b for a, b in zip(scores, scores[1:]))


def test_pca_score_centers_columns():
    # a huge constant offset must not register as signal
    x = _rank_k_matrix(64, 8, 2, RNG) + 1000.0
    assert pca_score(x, tau=0.99) == 2 / 8


def test_pca_score_contracts():
    with pytest.raises(ContractError):
        pca_score(RNG.normal(size=(1, 4)))
    with pytest.raises(ContractError):
        pca_score(RNG.normal(size=(4, 4)), tau=1.0)


def test_cka_self_similarity_and_invariances():
    x = RNG.normal(size=(64, 8))
    assert abs(linear_cka(x, x) - 1.0) < 1e-6
    # orthogonal rotation and positive scaling leave CKA unchanged
    q, _ = np.linalg.qr(RNG.normal(size=(8, 8)))
    assert abs(linear_cka(x, 3.7 * (x @ q)) - 1.0) < 1e-6
    y = RNG.normal(size=(64, 8))
    assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12


def test_cka_matches_double_loop_oracle():
    for trial in range(5):
        rng = np.random.default_rng(300 + trial)
        x = rng.normal(size=(64, 8))
        y = rng.normal(size=(64, 8))
        assert abs(linear_cka(x, y) - cka_double_loop(x, y)) < 1e-8


def test_cka_heads_matrix_invariants_and_permutation():
    heads = [RNG.normal(size=(32, 4)) for _ in range(5)]
    m = cka_heads(heads, layer=2)
    q = m.q
    assert m.layer == 2
    assert np.allclose(q, q.T, atol=1e-12)
    assert np.allclose(np.diag(q), 1.0, atol=1e-6)
    assert np.all(q >= 0.0) and np.all(q <= 1.0 + 1e-9)
    perm = [3, 0, 4, 1, 2]
    qp = cka_heads([heads[i] for i in perm]).q
    assert np.allclose(qp, q[np.ix_(perm, perm)], atol=1e-12)


def test_cka_heads_contracts():
    with pytest.raises(ContractError):
        cka_heads([])
    with pytest.raises(ContractError):
        cka_heads([np.zeros((4, 2)), np.zeros((5, 2))])
    with pytest.raises(ContractError):
        cka_heads([np.zeros((1, 2))])


def test_block_similarity_known_values():
    f = RNG.normal(size=(2, 5, 8))
    assert abs(block_similarity([f, f.copy()]) - 1.0) < 1e-6
    assert abs(block_similarity([f, -f]) + 1.0) < 1e-6

    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    c = np.array([[1.0, 1.0]]) / np.sqrt(2)
    # pairs: (a,b)=0, (a,c)=cos45, (b,c)=cos45
    want = (0.0 + np.sqrt(0.5) + np.sqrt(0.5)) / 3
    assert abs(block_similarity([a, b, c]) - want) < 1e-9
    with pytest.raises(ContractError):
        block_similarity([a])


def test_export_pca_table_row_count(tmp_path):
    table = PcaScoreTable()
    for e in range(2):
        for blk in range(3):
            table.add(e, 0, blk, 16, 0.5)
    path = tmp_path / "pca.csv"
    export_figure_data(table, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,layer,cand,ffn_dim,score"
    assert len(lines) == 1 + 6


def test_export_cka_matrix_and_roundtrip(tmp_path):
    q = np.abs(RNG.normal(size=(4, 4)))
    q = (q + q.T) / (q.max() * 2.1)
    np.fill_diagonal(q, 1.0)
    m = CkaMatrix(layer=1, q=q)
    path = tmp_path / "cka.csv"
    export_figure_data(m, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 16
    # values round-trip float64 exactly
    for ln in lines[1:]:
        layer, i, j, value = ln.split(",")
        assert float(value) == q[int(i), int(j)]


def test_export_similarity_table(tmp_path):
    t = SimilarityTable()
    t.add(0, 1, 2, 0.123456789123456789)
    path = tmp_path / "sim.csv"
    export_figure_data(t, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,pair_a,pair_b,value"
    layer, a, b, v = lines[1].split(",")
    assert float(v) == t.rows[0][3]


def test_pca_table_rejects_out_of_range_scores():
    table = PcaScoreTable()
    with pytest.raises(ContractError):
        table.add(0, 0, 0, 16, 0.0)
    with pytest.raises(ContractError):
        table.add(0, 0, 0, 16, 1.5)
