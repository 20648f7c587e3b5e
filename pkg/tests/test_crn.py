import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcrn.crn import count_macs, crn_apply, crn_forward, g_aggregate, h_condition, init_crn_params
from hcrn.gradcheck import finite_diff_check
from hcrn.params import ModelParams
from hcrn.sampler import SubsetPlan, build_plan
from hcrn.tensor import ShapeError, Tensor, backward, parameter, tsum

import oracles


def make_params(n, k_max, d, gated, seed=0, scale=1.0):
    params = ModelParams()
    init_crn_params(params, "u", n, k_max, d, gated, np.random.default_rng(seed))
    for p in params.values():
        p.data = p.data * scale
    return params


def weights_by_k(params):
    grouped = {}
    for key, value in oracles.nested(params, "u.k").items():
        k, name = key.split(".", 1)
        grouped.setdefault(int(k), {})[name] = value
    return grouped


def exhaustive_plan(n):
    plan = build_plan(n, n - 1, 10**6, 0)
    for k in plan.sizes:
        plan.selected[k] = sorted(plan.selected[k])
    return plan


def test_g_aggregate():
    x, y = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(g_aggregate([x]).data, x.data)
    np.testing.assert_array_equal(g_aggregate([x, x]).data, x.data)
    np.testing.assert_array_equal(g_aggregate([x, y]).data, g_aggregate([y, x]).data)
    with pytest.raises(ShapeError):
        g_aggregate([])


def test_h_condition_zero_weights_plain():
    params = make_params(4, 3, 3, False, scale=0.0)
    w = {k[3:]: v for k, v in params.scope("u").items() if k.startswith("k2.")}
    out = h_condition(Tensor(np.ones(3)), Tensor(np.ones(3)), w, gated=False)
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_h_condition_closed_gate():
    params = make_params(4, 3, 3, True, seed=1)
    w = {k[3:]: v for k, v in params.scope("u").items() if k.startswith("k2.")}
    w["h2.b"] = Tensor(np.full(3, -800.0))
    w["h2.w"] = Tensor(np.zeros((6, 3)))
    out = h_condition(Tensor(np.ones(3)), Tensor(np.ones(3)), w, gated=True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-300)


def test_h_condition_matches_scalar_oracle():
    params = make_params(4, 3, 3, True, seed=2)
    w = {k[3:]: v for k, v in params.scope("u").items() if k.startswith("k2.")}
    x, c = [0.3, -1.2, 0.7], [1.1, 0.2, -0.4]
    got = h_condition(Tensor(x), Tensor(c), w, gated=True).data
    want = oracles.h_k(x, c, {k: v.data.tolist() for k, v in w.items()}, True)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_h_condition_dimension_mismatch():
    params = make_params(4, 3, 3, False)
    w = {k[3:]: v for k, v in params.scope("u").items() if k.startswith("k2.")}
    with pytest.raises(ShapeError):
        h_condition(Tensor(np.ones(3)), Tensor(np.ones(2)), w, gated=False)


def test_open_gate_reproduces_plain_unit():
    gated = make_params(5, 4, 3, True, seed=3)
    plain = ModelParams({k: v for k, v in gated.items() if ".h1." in k})
    for k in gated:
        if ".h2." in k:
            gated[k].data = np.zeros_like(gated[k].data)
            if k.endswith(".b"):
                gated[k].data += 800.0  # sigmoid saturates at exactly 1.0
    S = [Tensor(v) for v in np.random.default_rng(0).normal(size=(5, 3))]
    c = Tensor(np.array([0.5, -0.5, 1.0]))
    plan = build_plan(5, 4, 2, 0)
    a = crn_forward(S, c, gated.scope("u"), plan, gated=True)
    b = crn_forward(S, c, plain.scope("u"), plan, gated=False)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


@pytest.mark.parametrize("gated", [False, True])
def test_exhaustive_oracle_n3_d2(gated):
    rng = np.random.default_rng(7)
    params = make_params(3, 2, 2, gated, seed=5, scale=0.5)
    S = rng.normal(size=(3, 2)).tolist()
    c = rng.normal(size=2).tolist()
    got = crn_forward([Tensor(s) for s in S], Tensor(c), params.scope("u"), exhaustive_plan(3), gated)
    want = oracles.crn_exhaustive(S, c, weights_by_k(params), gated)
    assert len(got) == len(want) == 1
    np.testing.assert_allclose([r.data for r in got], want, rtol=0, atol=1e-10)


def test_sampled_plan_matches_oracle_with_positions():
    rng = np.random.default_rng(8)
    params = make_params(6, 5, 3, True, seed=9)
    plan = build_plan(6, 5, 2, 4)
    X = rng.normal(size=(6, 2, 3))  # two positions per object
    c = rng.normal(size=3)
    got = crn_apply(Tensor(X), Tensor(c), params.scope("u"), plan, gated=True).data
    for pos in range(2):
        want = oracles.crn_with_subsets(X[:, pos].tolist(), c.tolist(), weights_by_k(params), plan.selected, True)
        np.testing.assert_allclose(got[:, pos], want, atol=1e-12)


@pytest.mark.parametrize("n, expected", [(6, 4), (2, 1), (3, 1), (16, 14)])
def test_output_length(n, expected):
    params = make_params(n, max(n - 1, 1), 2, False)
    S = [Tensor(np.ones(2) * i) for i in range(n)]
    out = crn_forward(S, Tensor(np.zeros(2)), params.scope("u"), build_plan(n, max(n - 1, 1), 2, 0), False)
    assert len(out) == expected == max(n - 2, 1)
    assert all(r.shape == (2,) for r in out)


def test_identical_inputs_give_equal_relations():
    n = 5
    params = make_params(n, 4, 3, True, seed=1)
    params_k = params.scope("u")
    # make every h_k share weights so equality is about aggregation, not parameters
    for k in (3, 4):
        for name in ("h1.w", "h1.b", "h2.w", "h2.b"):
            params_k[f"k{k}.{name}"] = params_k[f"k2.{name}"]
    S = [Tensor([0.2, -0.3, 0.9])] * n
    out = crn_forward(S, Tensor([1.0, 0.0, -1.0]), params_k, exhaustive_plan(n), True)
    for r in out[1:]:
        np.testing.assert_allclose(r.data, out[0].data, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 7), st.integers(0, 10_000))
def test_subset_order_invariance(n, seed):
    params = make_params(n, n - 1, 2, True, seed=seed % 17)
    plan = build_plan(n, n - 1, 3, seed)
    shuffled = SubsetPlan(plan.n, plan.k_max, plan.t, {k: v[::-1] for k, v in plan.selected.items()})
    X = Tensor(np.random.default_rng(seed).normal(size=(n, 2)))
    c = Tensor(np.ones(2))
    a = crn_apply(X, c, params.scope("u"), plan, True).data
    b = crn_apply(X, c, params.scope("u"), shuffled, True).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_plan_params_mismatch():
    params = make_params(4, 3, 2, False)
    X = Tensor(np.ones((5, 2)))
    with pytest.raises(ShapeError):
        crn_apply(X, Tensor(np.ones(2)), params.scope("u"), build_plan(4, 3, 1, 0), False)
    with pytest.raises(ShapeError):
        crn_apply(X, Tensor(np.ones(2)), params.scope("u"), build_plan(5, 4, 1, 0), False)


def test_every_parameter_gets_gradient(rng):
    params = make_params(5, 4, 3, True, seed=4)
    X = Tensor(rng.normal(size=(5, 3)))
    c = Tensor(rng.normal(size=3))
    plan = build_plan(5, 4, 2, 1)
    weights = params.scope("u")
    out = crn_apply(X, c, weights, plan, True)
    backward(tsum(out * Tensor(rng.normal(size=out.shape))), list(params.values()))
    assert all(np.abs(p.grad).max() > 0 for p in params.values())
    X = parameter(X.data)

    def fn():
        return tsum(crn_apply(X, c, weights, plan, True) * Tensor(np.linspace(-1, 1, out.size).reshape(out.shape)))

    assert finite_diff_check(fn, [X, *params.values()]) < 1e-4


def test_batched_matches_per_sample(rng):
    params = make_params(6, 5, 3, True, seed=6)
    plan = build_plan(6, 5, 2, 2)
    X = rng.normal(size=(4, 6, 3))
    c = rng.normal(size=(4, 3))
    batched = crn_apply(Tensor(X), Tensor(c), params.scope("u"), plan, True).data
    for b in range(4):
        single = crn_apply(Tensor(X[b]), Tensor(c[b]), params.scope("u"), plan, True).data
        np.testing.assert_allclose(batched[b], single, atol=1e-13)


def test_mac_tally():
    params = make_params(6, 5, 4, True)
    plan = build_plan(6, 5, 2, 0)
    with count_macs() as outer:
        with count_macs() as inner:
            crn_apply(Tensor(np.ones((6, 3, 4))), Tensor(np.ones(4)), params.scope("u"), plan, True)
    assert inner == outer
    assert inner.subsets == 8
    assert inner.relation == sum(2 * k * 3 * 4 for k in range(2, 6))
    assert inner.linear == 8 * 3 * (2 * 4 * 4) * 2
