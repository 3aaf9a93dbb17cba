import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseseg.sparsity import (
    Q_EPS, RegionGrid, SparseState, broadcast_weights, rate_per_image, rate_per_location,
    select_wta, sparse_head, sparsity_penalty, sparsity_penalty_grad, update_q,
)
from sparseseg.tensor import ParameterError


# -- region geometry and the sparse head ------------------------------------------------

def test_region_grid_geometry():
    toy = RegionGrid.for_image(64, 128)
    assert (toy.grid, toy.tau, toy.n_regions, toy.image_dims) == ((4, 8), 2, 32, (64, 128))
    # 1024x2048, 256px regions, half-res features at half-res stride 32 (64 full-res px)
    big = RegionGrid.for_image(1024, 2048, region_px=256, feature_stride=64)
    assert (big.tau, big.grid, big.n_regions) == (4, (4, 8), 32)
    with pytest.raises(ParameterError):
        RegionGrid.for_image(60, 128)
    with pytest.raises(ParameterError):
        RegionGrid(16, (4, 8), feature_stride=6)


def test_sparse_head_examples(rng):
    grid = RegionGrid(256, (4, 8), 64)
    feats = rng.normal(size=(2, 5, 16, 32))
    assert not sparse_head(feats, grid, np.zeros((5, 4, 4))).any()
    assert sparse_head(feats, grid, np.zeros((5, 4, 4))).shape == (2, 4, 8)
    delta = np.zeros((5, 4, 4))
    delta[0, 0, 0] = 1.0
    np.testing.assert_array_equal(sparse_head(feats, grid, delta), feats[:, 0, ::4, ::4])
    with pytest.raises(ParameterError):
        sparse_head(feats[:, :, :15], grid, delta)


# -- rates -----------------------------------------------------------------------------

def test_rate_examples():
    assert rate_per_image(np.zeros((1, 4, 8))).tolist() == [0.5]
    assert abs(rate_per_image(np.full((1, 4, 8), 20.0))[0] - 1.0) <= 1e-8
    half = np.full((1, 4, 8), 20.0)
    half[:, :2] = -20.0
    assert abs(rate_per_image(half)[0] - 0.5) <= 1e-8
    assert np.all(rate_per_location(np.zeros((3, 4, 8))) == 0.5)
    pair = np.zeros((2, 1, 1))
    pair[1] = 20.0
    assert abs(rate_per_location(pair)[0, 0] - 0.75) <= 1e-8


def test_rate_per_location_of_identical_maps(rng):
    s = rng.normal(size=(1, 4, 8))
    np.testing.assert_allclose(rate_per_location(np.repeat(s, 3, axis=0)), 1 / (1 + np.exp(-s[0])),
                               atol=1e-15)


def test_rate_duality(rng):
    s = rng.normal(size=(5, 4, 8))
    transposed = s.reshape(5, -1).T[:, :, None]        # batch <-> spatial
    np.testing.assert_allclose(rate_per_location(transposed)[:, 0], rate_per_image(s), atol=1e-15)


# -- moving average and penalty ------------------------------------------------------------

def test_update_q_examples():
    assert update_q(0.5, 0.3, 0.9) == pytest.approx(0.48, abs=1e-15)
    assert update_q(0.37, 0.37, 0.9) == pytest.approx(0.37, abs=1e-15)
    q = 0.5
    for step in range(1, 60):
        q = update_q(q, 0.25, 0.9)
        assert q - 0.25 == pytest.approx(0.25 * 0.9 ** step, rel=1e-9)
    assert update_q(0.0, 0.0) == Q_EPS and update_q(1.0, 1.0) == 1 - Q_EPS
    with pytest.raises(ParameterError):
        update_q(0.5, 0.5, 1.0)


def test_penalty_examples():
    assert sparsity_penalty(0.5, 0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert sparsity_penalty(0.25, 0.25, 1) == pytest.approx(0.562335, abs=1e-6)
    assert sparsity_penalty(0.3, 0.9, 0) == 0.0
    assert math.isfinite(sparsity_penalty(0.3, 0.0, 1)) and math.isfinite(sparsity_penalty(0.3, 1.0, 1))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.0, 10.0))
def test_penalty_lower_bound_and_gradient(p, q, lam):
    entropy = -p * math.log(p) - (1 - p) * math.log(1 - p)
    assert sparsity_penalty(p, q, lam) >= lam * entropy - 1e-12
    h = 1e-6
    fd = (sparsity_penalty(p, q + h, lam) - sparsity_penalty(p, q - h, lam)) / (2 * h)
    assert sparsity_penalty_grad(p, q, lam) == pytest.approx(fd, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("p", [0.1, 0.25, 0.5, 0.8])
def test_penalty_minimised_at_target(p):
    assert sparsity_penalty_grad(p, p - 1e-3, 1.0) < 0 < sparsity_penalty_grad(p, p + 1e-3, 1.0)
    assert sparsity_penalty_grad(p, p, 1.0) == pytest.approx(0.0, abs=1e-12)


# -- winner-take-all -------------------------------------------------------------------

def test_wta_examples(rng):
    s = np.array([[[0.9, 0.1], [0.4, 0.8]]])
    np.testing.assert_array_equal(select_wta(s, 2), [[[1, 0], [0, 1]]])
    assert np.all(select_wta(rng.normal(size=(2, 4, 8)), 32) == 1)
    assert not select_wta(rng.normal(size=(2, 4, 8)), 0).any()
    assert RegionGrid().k_for(0.25) == 8
    with pytest.raises(ParameterError):
        select_wta(s, 5)
    with pytest.raises(ParameterError):
        select_wta(s, -1)


def test_wta_ties_go_to_earlier_regions():
    mask = select_wta(np.zeros((1, 2, 3)), 4)
    np.testing.assert_array_equal(mask, [[[1, 1, 1], [1, 0, 0]]])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=12, max_size=12, unique=True),
       st.integers(0, 12))
def test_wta_count_and_monotone_invariance(values, k):
    s = np.array(values, dtype=float).reshape(1, 3, 4)
    mask = select_wta(s, k)
    assert set(np.unique(mask)) <= {0.0, 1.0} and mask.sum() == k
    if k:
        assert s[mask == 1].min() > (s[mask == 0].max() if k < 12 else -np.inf)
    np.testing.assert_array_equal(select_wta(np.exp(s / 100), k), mask)
    np.testing.assert_array_equal(select_wta(3 * s + 7, k), mask)


def test_sparse_state_from_scores(rng):
    state = SparseState.from_scores(rng.normal(size=(2, 4, 8)), 8, q=2.0)
    assert state.mask.sum() == 16 and len(state.active) == 16
    assert state.q == 1 - Q_EPS
    assert all(state.mask[i, y, x] == 1 for i, y, x in state.active)


# -- broadcast ---------------------------------------------------------------------------

def test_broadcast_weights_examples(rng):
    grid = RegionGrid()
    s = np.zeros((1, 4, 8))
    assert np.all(broadcast_weights(np.ones_like(s), s, grid, (16, 32)) == 0.5)
    mask = np.zeros_like(s)
    mask[0, 2, 5] = 1
    w = broadcast_weights(mask, rng.normal(size=s.shape), grid, (16, 32))[0, 0]
    support = np.argwhere(w != 0)
    assert support[:, 0].min() == 8 and support[:, 0].max() == 11
    assert support[:, 1].min() == 20 and support[:, 1].max() == 23
    assert len(support) == 16


def test_broadcast_footprint_at_large_scale():
    grid = RegionGrid(256, (4, 8), 64)
    w = broadcast_weights(np.ones((1, 4, 8)), np.zeros((1, 4, 8)), grid, (256, 512))
    assert w.shape == (1, 1, 256, 512)   # 64x64 entries per region
    with pytest.raises(ParameterError):
        broadcast_weights(np.ones((1, 4, 8)), np.zeros((1, 4, 8)), grid, (250, 512))
