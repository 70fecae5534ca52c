"""Growth selection and head-count search against literal oracles."""

import numpy as np
import pytest

from elm.elastic import (GrowthPolicy, HeadSearchPolicy, apply_head_search,
                         search_head_count, select_growth)
from elm.errors import ContractError
from elm.genome import ModelDims, ParamBudget, count_params, max_params_genome
from elm.supernet import ElasticSupernet
from elm.corpus import N_RESERVED, make_mlm_batch

from oracles import head_search_literal

DIMS = ModelDims(n_layers=2, hidden=8, heads=2, inner=4, ffn_init=16,
                 ffn_step=16, ffn_max=48, n_max=16, vocab_size=11)


def _full_table(ffn=16, n_layers=2):
    return {(l, j): ffn for l in range(n_layers) for j in range(6)}


def _loose_budget():
    table = {k: DIMS.ffn_max for k in _full_table()}
    ceiling = count_params(max_params_genome(DIMS, table), DIMS) + 1
    return ParamBudget(ceiling)


def test_select_growth_ranks_by_score_with_tie_break():
    table = _full_table()
    scores = {k: 0.5 for k in table}
    scores[(1, 3)] = 0.9
    scores[(0, 2)] = 0.7
    policy = GrowthPolicy(k=2, step=16, ffn_max=48, budget=_loose_budget())
    assert select_growth(scores, policy, DIMS, table) == [(1, 3), (0, 2)]
    # all-equal scores: deterministic (layer asc, cand asc) order
    flat = {k: 0.5 for k in table}
    assert select_growth(flat, policy, DIMS, table) == [(0, 0), (0, 1)]


def test_select_growth_spec_ranking_example():
    # five blocks, scores [0.5, 0.9, 0.7, 0.95, 0.6], K=2 -> blocks 4 and 2
    table = {(0, j): 16 for j in range(5)}
    dims = ModelDims(n_layers=1, hidden=8, heads=2, inner=4, ffn_init=16,
                     ffn_step=16, ffn_max=48, n_max=16, vocab_size=11)
    scores = {(0, 0): 0.5, (0, 1): 0.9, (0, 2): 0.7, (0, 3): 0.95, (0, 4): 0.6}
    policy = GrowthPolicy(k=2, step=16, ffn_max=48,
                          budget=ParamBudget(10**9))
    assert select_growth(scores, policy, dims, table) == [(0, 3), (0, 1)]


def test_select_growth_skips_capped_blocks():
    table = _full_table()
    table[(1, 3)] = 48  # already at ffn_max
    scores = {k: 0.1 for k in table}
    scores[(1, 3)] = 0.99
    scores[(0, 1)] = 0.8
    scores[(0, 4)] = 0.7
    policy = GrowthPolicy(k=2, step=16, ffn_max=48, budget=_loose_budget())
    assert select_growth(scores, policy, DIMS, table) == [(0, 1), (0, 4)]


def test_select_growth_truncates_at_budget():
    table = _full_table()
    # ceiling admits exactly one growth of the most expensive path
    base = count_params(max_params_genome(DIMS, table), DIMS)
    one_growth = dict(table)
    one_growth[(0, 0)] = 32
    after_one = count_params(max_params_genome(DIMS, one_growth), DIMS)
    policy = GrowthPolicy(k=2, step=16, ffn_max=48,
                          budget=ParamBudget(after_one))
    scores = {k: 0.1 for k in table}
    scores[(0, 0)] = 0.9
    scores[(1, 0)] = 0.8  # would grow the layer-1 max path: over budget
    got = select_growth(scores, policy, DIMS, table)
    assert got == [(0, 0)]
    assert base <= after_one


def test_select_growth_k_zero_or_empty():
    table = _full_table()
    scores = {k: 0.5 for k in table}
    policy = GrowthPolicy(k=0, step=16, ffn_max=48, budget=_loose_budget())
    assert select_growth(scores, policy, DIMS, table) == []
    with pytest.raises(ContractError):
        select_growth({(0, 0): 1.0}, policy, DIMS, table)


def test_head_search_hand_traces():
    # only Q[1,2] (1-based) above eta: remove head 2, 528 % 11 == 0
    q = np.eye(12)
    q[0, 1] = q[1, 0] = 0.95
    assert search_head_count(q, HeadSearchPolicy(0.9, 528)) == 11
    # three removals -> 9, then 528 % 9 != 0 -> 8
    q = np.eye(12)
    for i, j in [(0, 1), (0, 2), (0, 3)]:
        q[i, j] = q[j, i] = 0.95
    assert search_head_count(q, HeadSearchPolicy(0.9, 528)) == 8
    # nothing above threshold: all heads kept
    assert search_head_count(np.eye(12), HeadSearchPolicy(0.9, 528)) == 12


def test_head_search_eta_one_keeps_all_heads():
    q = np.ones((6, 6))  # strict inequality: 1.0 > 1.0 is false
    assert search_head_count(q, HeadSearchPolicy(1.0, 66)) == 6


def test_head_search_maximal_removal_reaches_one():
    q = np.full((8, 8), 0.5)
    np.fill_diagonal(q, 1.0)
    assert search_head_count(q, HeadSearchPolicy(1e-9, 64)) == 1


def test_head_search_matches_literal_oracle():
    rng = np.random.default_rng(42)
    for _ in range(300):
        h = int(rng.integers(2, 17))
        width = int(rng.choice([64, 192, 528]))
        q = rng.uniform(0.5, 1.0, size=(h, h))
        q = (q + q.T) / 2
        np.fill_diagonal(q, 1.0)
        eta = float(rng.uniform(0.6, 0.99))
        removed, want = head_search_literal(q, eta, width)
        got = search_head_count(q, HeadSearchPolicy(eta, width))
        assert got == want, (h, width, eta, removed)


def test_head_search_contracts():
    with pytest.raises(ContractError):
        search_head_count(np.zeros((2, 3)), HeadSearchPolicy(0.9, 8))
    with pytest.raises(ContractError):
        HeadSearchPolicy(0.0, 8)
    with pytest.raises(ContractError):
        HeadSearchPolicy(0.9, 0)


def test_apply_head_search_is_deterministic_and_leaves_net_untouched():
    net = ElasticSupernet(DIMS, np.random.default_rng(0))
    genome = net.genome_with_current_dims([0, 3])
    rng = np.random.default_rng(7)
    ids = rng.integers(N_RESERVED, DIMS.vocab_size, size=(2, 8)).astype(np.int32)
    batches = [make_mlm_batch(ids, 0.15, seed=s, vocab_size=DIMS.vocab_size)
               for s in (1, 2)]
    before = {k: t.data.copy() for k, t in net.params.items()}
    snap = net.snapshot()
    g1, mats1 = apply_head_search(snap, genome, eta=0.9, probe_batches=batches)
    g2, mats2 = apply_head_search(snap, genome, eta=0.9, probe_batches=batches)
    assert g1 == g2
    assert all(np.array_equal(a.q, b.q) for a, b in zip(mats1, mats2))
    for k, t in net.params.items():
        assert np.array_equal(t.data, before[k])
    # searched counts divide each layer's attention width
    for l, h in enumerate(g1.heads):
        width = DIMS.attention_width(genome.choice(l))
        assert width % h == 0 and 1 <= h <= DIMS.heads
    # choices and ffn dims are untouched by head search
    assert g1.choices == genome.choices and g1.ffn_dims == genome.ffn_dims


def test_apply_head_search_eta_one_returns_default_heads():
    net = ElasticSupernet(DIMS, np.random.default_rng(1))
    genome = net.genome_with_current_dims([1, 4])
    ids = np.random.default_rng(3).integers(
        N_RESERVED, DIMS.vocab_size, size=(2, 8)).astype(np.int32)
    batches = [make_mlm_batch(ids, 0.15, seed=0, vocab_size=DIMS.vocab_size)]
    searched, _ = apply_head_search(net.snapshot(), genome, eta=1.0,
                                    probe_batches=batches)
    assert searched.heads == (DIMS.heads, DIMS.heads)
