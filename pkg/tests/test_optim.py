"""Optimizer laziness, decay filtering, moment reset, LR schedule."""

import numpy as np
import pytest

from elm import autograd as ag
from elm.errors import ContractError
from elm.optim import AdamW, lr_schedule


def _params():
    rng = np.random.default_rng(0)
    return {
        "w": ag.tensor(rng.normal(size=(4, 3))),
        "b": ag.tensor(rng.normal(size=(3,))),
        "other.w": ag.tensor(rng.normal(size=(2, 2))),
    }


def test_step_skips_parameters_without_grads():
    params = _params()
    frozen = params["other.w"].data.copy()
    params["w"].grad = np.ones((4, 3))
    params["b"].grad = np.ones(3)
    opt = AdamW(params, lr=0.1)
    assert opt.step() == 2
    assert np.array_equal(params["other.w"].data, frozen)
    assert not np.array_equal(params["w"].data, _params()["w"].data)


def test_single_step_matches_hand_formula():
    p = ag.tensor(np.array([[1.0, -2.0]]))
    g = np.array([[0.5, 0.25]])
    p.grad = g.copy()
    opt = AdamW({"w": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8,
                weight_decay=0.01)
    opt.step()
    # bias-corrected first step: m_hat = g, v_hat = g*g
    base = np.array([[1.0, -2.0]]) - 0.1 * g / (np.abs(g) + 1e-8)
    want = base - 0.1 * 0.01 * base
    assert np.allclose(p.data, want, atol=1e-12)


def test_weight_decay_skips_vectors():
    p = ag.tensor(np.array([3.0, -3.0]))
    p.grad = np.zeros(2)
    opt = AdamW({"b": p}, lr=0.1, weight_decay=0.5)
    opt.step()
    assert np.allclose(p.data, [3.0, -3.0])  # zero grad, no decay on 1-D
    w = ag.tensor(np.array([[3.0]]))
    w.grad = np.zeros((1, 1))
    opt2 = AdamW({"w": w}, lr=0.1, weight_decay=0.5)
    opt2.step()
    assert w.data[0, 0] == pytest.approx(3.0 * (1 - 0.1 * 0.5))


def test_moments_reset_on_shape_change():
    p = ag.tensor(np.ones((2, 2)))
    opt = AdamW({"w": p}, lr=0.01)
    p.grad = np.ones((2, 2))
    opt.step()
    assert opt.step_counts()["w"] == 1
    # grow the tensor; stale moments must not leak into the new shape
    p.data = np.ones((2, 3))
    p.grad = np.ones((2, 3))
    opt.step()
    assert opt.step_counts()["w"] == 1
    assert opt.state_arrays()["opt.m.w"].shape == (2, 3)


def test_grad_shape_contract():
    p = ag.tensor(np.ones((2, 2)))
    p.grad = np.ones(3)
    with pytest.raises(ContractError):
        AdamW({"w": p}).step()


def test_state_round_trip_is_bitwise():
    params = _params()
    rng = np.random.default_rng(1)
    opt = AdamW(params, lr=0.05)
    for _ in range(3):
        for p in params.values():
            p.grad = rng.normal(size=p.data.shape)
        opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    counts = opt.step_counts()

    twin = AdamW(params, lr=0.05)
    twin.load_state(arrays, counts)
    assert twin.step_counts() == counts
    for k, v in twin.state_arrays().items():
        assert np.array_equal(v, arrays[k]), k


def test_intermittent_training_keeps_per_name_bias_correction():
    a = ag.tensor(np.ones((2, 2)))
    b = ag.tensor(np.ones((2, 2)))
    opt = AdamW({"a": a, "b": b}, lr=0.01)
    for i in range(4):
        a.grad = np.full((2, 2), 0.1)
        b.grad = np.full((2, 2), 0.1) if i % 2 == 0 else None
        opt.step()
    assert opt.step_counts() == {"a": 4, "b": 2}


def test_lr_schedule_shape():
    total, base = 100, 3e-4
    vals = [lr_schedule(s, total, base, warmup_ratio=0.1) for s in range(total)]
    assert vals[0] == pytest.approx(base / 10)
    assert vals[9] == pytest.approx(base)
    assert max(vals) == pytest.approx(base)
    # strictly decreasing once decay begins, hitting zero at the end
    assert all(x > y for x, y in zip(vals[10:], vals[11:]))
    assert lr_schedule(total, total, base) == 0.0
    with pytest.raises(ContractError):
        lr_schedule(0, 0, base)
