import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mow import autodiff as ad
from mow.distances import (DistanceSpec, cramer_wold_mc, mmd_imq, sample_unit_directions, silverman_gamma,
                           sliced_wasserstein)


def _mmd_reference(z, v, c, unbiased):
    def k(a, b):
        return c / (c + np.sum((a - b) ** 2))

    n, m = len(z), len(v)
    zz = sum(k(z[i], z[j]) for i in range(n) for j in range(n) if not unbiased or i != j)
    vv = sum(k(v[i], v[j]) for i in range(m) for j in range(m) if not unbiased or i != j)
    zv = sum(k(a, b) for a in z for b in v)
    if unbiased:
        return zz / (n * (n - 1)) + vv / (m * (m - 1)) - 2 * zv / (n * m)
    return zz / n**2 + vv / m**2 - 2 * zv / (n * m)


def _gauss(x, var):
    return math.exp(-x * x / (2 * var)) / math.sqrt(2 * math.pi * var)


def _cw_reference(z, dirs, gamma):
    total = 0.0
    for v in dirs:
        p = z @ v
        n = len(p)
        a = sum(_gauss(pi - pj, 2 * gamma) for pi in p for pj in p) / n**2
        c = -2 * sum(_gauss(pi, 1 + 2 * gamma) for pi in p) / n
        total += a + _gauss(0.0, 2 * (1 + gamma)) + c
    return total / len(dirs)


@pytest.mark.parametrize("unbiased", [True, False])
def test_mmd_matches_pairwise_sums(unbiased):
    rng = np.random.default_rng(0)
    z, v = rng.standard_normal((7, 3)), rng.standard_normal((5, 3))
    assert mmd_imq(z, v, 6.0, unbiased=unbiased) == pytest.approx(_mmd_reference(z, v, 6.0, unbiased), rel=1e-12)


def test_mmd_default_scale_is_twice_the_dimension():
    rng = np.random.default_rng(1)
    z, v = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    assert mmd_imq(z, v) == mmd_imq(z, v, 8.0)


def test_mmd_of_a_sample_with_itself():
    z = np.random.default_rng(2).standard_normal((9, 2))
    assert abs(mmd_imq(z, z, unbiased=False)) < 1e-15
    # with the diagonal removed the estimate is slightly negative
    assert mmd_imq(z, z) < 0


def test_mmd_unbiased_needs_two_rows():
    with pytest.raises(ValueError):
        mmd_imq(np.zeros((1, 2)), np.zeros((4, 2)))


def test_cramer_wold_single_point_value():
    value = cramer_wold_mc(np.zeros((1, 1)), np.ones((1, 1)), gamma=1.0)
    closed = (4 * math.pi) ** -0.5 + (8 * math.pi) ** -0.5 - 2 * (6 * math.pi) ** -0.5
    assert value == pytest.approx(closed, rel=1e-14)
    assert value == pytest.approx(0.0209071, abs=1e-7)


def test_cramer_wold_matches_direct_sums():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((6, 3))
    dirs = sample_unit_directions(4, 3, rng)
    assert cramer_wold_mc(z, dirs, 0.3) == pytest.approx(_cw_reference(z, dirs, 0.3), rel=1e-12)


def test_cramer_wold_chunking_is_invisible(monkeypatch):
    import mow.distances as dist

    rng = np.random.default_rng(4)
    z = rng.standard_normal((10, 2))
    dirs = sample_unit_directions(37, 2, rng)
    whole = cramer_wold_mc(z, dirs)
    monkeypatch.setattr(dist, "_CW_BLOCK", 100 * 3)
    assert cramer_wold_mc(z, dirs) == pytest.approx(whole, rel=1e-13)


def test_cramer_wold_default_gamma_is_silverman():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((12, 2))
    dirs = sample_unit_directions(5, 2, rng)
    assert cramer_wold_mc(z, dirs) == cramer_wold_mc(z, dirs, silverman_gamma(12))
    assert silverman_gamma(12) == pytest.approx((1 / 9) ** 0.4)


def test_cramer_wold_rejects_bad_inputs():
    with pytest.raises(ValueError):
        cramer_wold_mc(np.zeros((3, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        cramer_wold_mc(np.zeros((3, 2)), np.ones((1, 2)), gamma=0.0)


def test_sliced_wasserstein_matches_sorted_projections():
    rng = np.random.default_rng(6)
    z, v = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    dirs = sample_unit_directions(5, 3, rng)
    expected = np.mean([np.mean((np.sort(z @ d) - np.sort(v @ d)) ** 2) for d in dirs])
    assert sliced_wasserstein(z, v, dirs) == pytest.approx(expected, rel=1e-13)


def test_sliced_wasserstein_self_distance_is_exactly_zero():
    z = np.random.default_rng(7).standard_normal((16, 4))
    assert sliced_wasserstein(z, z, sample_unit_directions(20, 4, np.random.default_rng(8))) == 0.0


def test_sliced_wasserstein_needs_equal_sizes():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((4, 2)), np.zeros((5, 2)), np.ones((1, 2)))


@pytest.mark.parametrize("kind", ["mmd_imq", "cramer_wold", "sliced_wasserstein"])
def test_batched_inputs_match_per_item(kind):
    rng = np.random.default_rng(9)
    spec = DistanceSpec(kind, n_directions=6)
    z, v = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 5, 2))
    dirs = sample_unit_directions(6, 2, rng)
    batched = spec(z, v, dirs)
    assert batched.shape == (3,)
    np.testing.assert_allclose(batched, [spec(z[i], v[i], dirs) for i in range(3)], rtol=1e-13)


@pytest.mark.parametrize("kind", ["mmd_imq", "cramer_wold", "sliced_wasserstein"])
def test_gradient_reaches_live_rows_only(kind):
    rng = np.random.default_rng(10)
    spec = DistanceSpec(kind, n_directions=5)
    frozen = rng.standard_normal((4, 2))
    params = ad.ParamVector.from_arrays({"live": rng.standard_normal((2, 2)), "idle": np.zeros(3)})
    v, dirs = spec.draw(rng, 6, 2)

    def program(tape):
        return spec(ad.concat_rows(tape.const(frozen), tape.param("live")), v, dirs)

    _, tape = ad.evaluate(program, params)
    grad = ad.backward(tape)
    assert np.all(grad[-3:] == 0.0)
    np.testing.assert_allclose(grad, ad.finite_diff_gradient(program, params, 1e-4, order=4), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["mmd_imq", "cramer_wold", "sliced_wasserstein"]))
def test_distances_are_permutation_invariant(seed, kind):
    rng = np.random.default_rng(seed)
    spec = DistanceSpec(kind, n_directions=7)
    z = rng.standard_normal((6, 3))
    v, dirs = spec.draw(rng, 6, 3)
    perm = rng.permutation(6)
    assert spec(z[perm], v, dirs) == pytest.approx(spec(z, v, dirs), rel=1e-12, abs=1e-15)
    assert spec(z, v[perm], dirs) == pytest.approx(spec(z, v, dirs), rel=1e-12, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_directions_lie_on_the_sphere(count, dim, seed):
    d = sample_unit_directions(count, dim, np.random.default_rng(seed))
    assert d.shape == (count, dim)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, rtol=1e-14)


def test_spec_draw_consumes_prior_then_directions():
    spec = DistanceSpec("sliced_wasserstein", n_directions=3)
    v, dirs = spec.draw(np.random.default_rng(11), 4, 2)
    rng = np.random.default_rng(11)
    assert np.array_equal(v, rng.standard_normal((4, 2)))
    assert np.array_equal(dirs, sample_unit_directions(3, 2, rng))
    assert DistanceSpec("mmd_imq").draw(np.random.default_rng(0), 4, 2)[1] is None


def test_spec_validation():
    with pytest.raises(ValueError):
        DistanceSpec("energy")
    with pytest.raises(ValueError):
        DistanceSpec(gamma=-1.0)
    with pytest.raises(ValueError):
        DistanceSpec("cramer_wold")(np.zeros((3, 2)), np.zeros((3, 2)))
