import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fastcaps import routing as R
from fastcaps.routing import RoutingGrouping, coefficient_count, predict_votes, route, squash
from fastcaps.tensor import ShapeError, Tape, Tensor, parameter, precision, sum_


# -------------------------------------------------------------------- squash


def test_squash_zero():
    np.testing.assert_array_equal(squash(np.zeros((1, 4))).data, 0.0)


@pytest.mark.parametrize("length,expected", [(1.0, 0.5), (3.0, 0.9)])
def test_squash_norm(length, expected, f64):
    d = np.array([0.6, -0.8])
    v = squash(length * d).data
    assert np.linalg.norm(v) == pytest.approx(expected, abs=1e-8)
    np.testing.assert_allclose(v / np.linalg.norm(v), d, atol=1e-12)


def test_squash_gradient(f64, rng):
    from test_tensor import grad_check

    probe = Tensor(rng.normal(size=(5, 4)))
    assert grad_check(lambda s: sum_(squash(s) * probe), rng.normal(size=(5, 4))) < 1e-6


def test_squash_gradient_near_zero(f64, rng):
    from test_tensor import grad_check

    probe = Tensor(rng.normal(size=(2, 3)))
    assert grad_check(lambda s: sum_(squash(s) * probe), 1e-3 * rng.normal(size=(2, 3)), eps=1e-7) < 1e-4


# -------------------------------------------------------------------- votes


def test_identity_transform_copies_u(rng):
    u = rng.normal(size=(3, 4)).astype(np.float32)
    W = np.broadcast_to(np.eye(4, dtype=np.float32), (3, 2, 4, 4)).copy()
    out = predict_votes(u, W).data
    for j in range(2):
        np.testing.assert_allclose(out[:, j], u, rtol=1e-6)


def test_votes_hand_arithmetic():
    out = predict_votes(np.array([[2.0, 3.0]]), np.array([1.0, 1.0]).reshape(1, 1, 2, 1)).data
    assert out.tolist() == [[[5.0]]]


def test_fast_2d_vote_shape():
    assert predict_votes(np.zeros((64, 256)), np.zeros((64, 2, 256, 16))).shape == (64, 2, 16)
    assert predict_votes(np.zeros((3, 64, 256)), np.zeros((64, 2, 256, 16))).shape == (3, 64, 2, 16)


def test_votes_match_einsum(rng, f64):
    u, W = rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 4, 3, 2))
    np.testing.assert_allclose(predict_votes(u, W).data, np.einsum("bid,ijde->bije", u, W), atol=1e-12)


def test_votes_gradient(rng, f64):
    from test_tensor import grad_check

    probe = Tensor(rng.normal(size=(2, 5, 4, 2)))
    assert grad_check(lambda u, W: sum_(predict_votes(u, W) * probe),
                      rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 4, 3, 2))) < 1e-6


def test_votes_shape_mismatch():
    with pytest.raises(ShapeError):
        predict_votes(np.zeros((4, 3)), np.zeros((4, 2, 5, 2)))


# ------------------------------------------------------------------- routing


def test_single_parent_sums_all_votes(rng, f64):
    votes = rng.normal(size=(6, 1, 3))
    v, s, state = route(votes, iterations=3)
    np.testing.assert_array_equal(state.coefficients, 1.0)
    np.testing.assert_allclose(v.data[0], oracles.squash_vec(votes.sum(axis=0)[0]), atol=1e-12)


def test_first_iteration_is_uniform(rng, f64):
    _, _, state = route(rng.normal(size=(5, 4, 3)), iterations=3, trace=True)
    np.testing.assert_allclose(state.trace[0]["coefficients"], 0.25)


def test_matches_straight_line_oracle(f64):
    for seed in range(20):
        votes = np.random.default_rng(seed).normal(size=(4, 3, 2))
        v, _, state = route(votes, iterations=3)
        ref_v, ref_c = oracles.route_straight(votes.tolist(), 3)
        np.testing.assert_allclose(v.data, ref_v, atol=1e-10)
        np.testing.assert_allclose(state.coefficients[0], ref_c, atol=1e-10)


def test_grouped_matches_grouped_oracle(f64):
    group_of = [0, 0, 1, 1, 1, 2]
    for seed in range(10):
        votes = np.random.default_rng(seed).normal(size=(6, 3, 2))
        v, _, state = route(votes, RoutingGrouping(np.array(group_of)), iterations=4)
        ref_v, ref_c = oracles.route_straight_grouped(votes.tolist(), group_of, 4)
        np.testing.assert_allclose(v.data, ref_v, atol=1e-10)
        np.testing.assert_allclose(state.coefficients[0], ref_c, atol=1e-10)


def test_identity_grouping_is_bit_identical(rng):
    votes = rng.normal(size=(2, 64, 2, 16)).astype(np.float32)
    ungrouped, _, _ = route(votes, None, 3)
    for grouping in (RoutingGrouping.identity(64), RoutingGrouping.by_location(64, 1)):
        grouped, _, _ = route(votes, grouping, 3)
        assert np.array_equal(grouped.data, ungrouped.data)


def test_batch_equals_per_sample(rng):
    votes = rng.normal(size=(3, 8, 2, 4)).astype(np.float32)
    batched = route(votes, iterations=3)[0].data
    for b in range(3):
        np.testing.assert_allclose(batched[b], route(votes[b], iterations=3)[0].data, rtol=1e-6)


def test_group_members_share_coefficients(rng):
    grouping = RoutingGrouping.by_location(4, 3)
    _, _, state = route(rng.normal(size=(1, 12, 3, 2)), grouping, 3)
    assert state.coefficients.shape == (1, 4, 3)


def test_parent_permutation_equivariance(rng, f64):
    votes = rng.normal(size=(7, 4, 3))
    perm = np.array([2, 0, 3, 1])
    v, _, st_ = route(votes, iterations=3)
    vp, _, stp = route(votes[:, perm], iterations=3)
    np.testing.assert_allclose(vp.data, v.data[perm], atol=1e-12)
    np.testing.assert_allclose(stp.coefficients[0], st_.coefficients[0][:, perm], atol=1e-12)


def test_unanimous_parent_gains_weight(rng, f64):
    votes = 0.3 * rng.normal(size=(10, 3, 4))
    votes[:, 1] = np.array([0.5, -0.2, 0.3, 0.1])  # every child agrees on parent 1
    _, _, state = route(votes, iterations=5, trace=True)
    share = [step["coefficients"][0, :, 1] for step in state.trace]
    for before, after in zip(share, share[1:]):
        assert np.all(after >= before - 1e-12)


def test_frozen_coefficients_reproduce_forward(rng, f64):
    votes = rng.normal(size=(2, 6, 3, 4))
    v, _, state = route(votes, iterations=3)
    v2, _, _ = route(votes, iterations=3, coefficients=state.coefficients)
    np.testing.assert_allclose(v2.data, v.data, atol=1e-12)


def test_gradient_with_constant_coefficients(rng, f64):
    """Tape gradient equals finite differences of routing whose final c is frozen."""
    votes = rng.normal(size=(2, 5, 3, 4))
    probe = rng.normal(size=(2, 3, 4))
    c = route(votes, iterations=3)[2].coefficients
    p = parameter(votes)
    with Tape() as tape:
        loss = sum_(route(p, iterations=3)[0] * Tensor(probe))
    grad = tape.backward(loss)[p]
    numeric = oracles.central_difference(
        lambda: float(np.sum(route(p, iterations=3, coefficients=c)[0].data * probe)), [p.data])
    assert oracles.max_rel_error(numeric, [grad]) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1),
       st.booleans())
def test_routing_invariants(n_in, n_out, dim, iters, seed, grouped):
    rng = np.random.default_rng(seed)
    votes = rng.normal(size=(n_in, n_out, dim)) * rng.uniform(0.01, 5.0)
    grouping = None
    if grouped:
        raw = rng.integers(0, max(1, n_in // 2), n_in)
        grouping = RoutingGrouping(np.unique(raw, return_inverse=True)[1])
    with precision("f64"):
        v, s, state = route(votes, grouping, iters, trace=True)
    for step in state.trace:
        c = step["coefficients"]
        np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(c >= 0)
        assert np.all(np.linalg.norm(step["v"], axis=-1) < 1)
    sn, vn = np.linalg.norm(s.data, axis=-1), np.linalg.norm(v.data, axis=-1)
    ok = sn > 1e-4
    cos = np.sum(s.data * v.data, axis=-1)[ok] / (sn[ok] * vn[ok])
    assert np.all(cos >= 1 - 1e-6)


# ------------------------------------------------------------ coefficients


def test_coefficient_counts():
    assert coefficient_count(2048, 2) == 4096
    assert coefficient_count(2048, 2, RoutingGrouping.by_location(64, 32)) == 128
    assert coefficient_count(64, 2, RoutingGrouping.identity(64)) == 128
    assert coefficient_count(1, 1, RoutingGrouping.identity(1)) == 1
    assert coefficient_count(23328, 2) / coefficient_count(512, 2) == 45.5625


def test_grouping_validation():
    with pytest.raises(ValueError):
        RoutingGrouping(np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        RoutingGrouping(np.array([0, 2]))
    with pytest.raises(ValueError):
        coefficient_count(5, 2, RoutingGrouping.identity(4))


def test_route_errors(rng):
    with pytest.raises(ValueError):
        route(rng.normal(size=(4, 2, 3)), iterations=0)
    with pytest.raises(ValueError):
        route(rng.normal(size=(4, 2, 3)), RoutingGrouping.identity(5))
    with pytest.raises(ShapeError):
        route(rng.normal(size=(1, 4, 2, 3)), coefficients=np.full((1, 3, 2), 0.5))


def test_trace_csv(tmp_path, rng):
    _, _, state = route(rng.normal(size=(3, 2, 2)), iterations=2, trace=True)
    R.write_trace_csv(state, tmp_path / "trace.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == 2 * 3 * 2
    assert {r["iteration"] for r in rows} == {"1", "2"}
    with pytest.raises(ValueError):
        R.write_trace_csv(route(np.ones((2, 2, 2)))[2], tmp_path / "x.csv")
