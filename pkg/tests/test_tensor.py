import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import recon, unfold_by_formula
from tdr.tensor import (
    MaskedTensor,
    availability_sets,
    dematricize,
    is_imagewise,
    khatri_rao,
    kron_factors,
    kronecker,
    masked_fnorm_sq,
    matricize,
    mode_n_product,
    project_omega,
    reconstruct,
)

dims4 = st.tuples(*(st.integers(1, 4) for _ in range(4)))


def test_project_omega_example():
    v = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
    mask = np.ones_like(v, dtype=bool)
    mask[0, 1, 0, 0] = False
    out = project_omega(MaskedTensor(v, mask))
    np.testing.assert_array_equal(out.values[..., 0, 0], [[1, 0], [3, 4]])
    np.testing.assert_array_equal(out.mask, mask)


def test_project_omega_endpoints():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2, 3, 2, 2))
    full = project_omega(MaskedTensor.full(v))
    np.testing.assert_array_equal(full.values, v)
    none = project_omega(MaskedTensor(v, np.zeros(v.shape, bool)))
    assert not none.values.any()


def test_masked_tensor_rejects_bad_shapes():
    with pytest.raises(ValueError):
        MaskedTensor(np.zeros((2, 2)), np.ones((2, 3), bool))
    with pytest.raises(ValueError):
        MaskedTensor(np.zeros((2, 0, 1)), np.ones((2, 0, 1), bool))


def test_matricize_small_example():
    t = np.arange(1, 9, dtype=float).reshape(2, 2, 2, 1, order="F")
    np.testing.assert_array_equal(matricize(t, 1), [[1, 3, 5, 7], [2, 4, 6, 8]])
    np.testing.assert_array_equal(dematricize(matricize(t, 1), 1, t.shape), t)


@settings(max_examples=40, deadline=None)
@given(dims4, st.integers(1, 4), st.integers(0, 2**31))
def test_matricize_matches_index_formula(dims, n, seed):
    t = np.random.default_rng(seed).standard_normal(dims)
    np.testing.assert_array_equal(matricize(t, n), unfold_by_formula(t, n))


@settings(max_examples=40, deadline=None)
@given(dims4, st.integers(1, 4), st.integers(0, 2**31))
def test_round_trip_bit_exact(dims, n, seed):
    t = np.random.default_rng(seed).standard_normal(dims)
    back = dematricize(matricize(t, n), n, dims)
    assert back.shape == t.shape
    assert np.array_equal(back, t)
    m = matricize(t, n)
    assert np.array_equal(matricize(dematricize(m, n, dims), n), m)


def test_scalar_tensor_every_mode():
    t = np.full((1, 1, 1, 1), 3.5)
    for n in range(1, 5):
        np.testing.assert_array_equal(matricize(t, n), [[3.5]])


def test_bad_mode_and_mismatch():
    t = np.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        matricize(t, 4)
    with pytest.raises(ValueError):
        matricize(t, 0)
    with pytest.raises(ValueError):
        dematricize(np.zeros((2, 3)), 1, (2, 2, 2))
    with pytest.raises(ValueError):
        mode_n_product(t, np.ones((2, 3)), 1)


def test_mode_product_example():
    t = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
    out = mode_n_product(t, np.array([[1.0, 1.0]]), 1)
    assert out.shape == (1, 2, 1, 1)
    np.testing.assert_array_equal(out.ravel(), [4, 6])


@settings(max_examples=30, deadline=None)
@given(dims4, st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_mode_product_unfolding_identity(dims, n, j, seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(dims)
    u = rng.standard_normal((j, dims[n - 1]))
    lhs = matricize(mode_n_product(t, u, n), n)
    rhs = u @ matricize(t, n)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1.0)
    np.testing.assert_array_equal(mode_n_product(t, np.eye(dims[n - 1]), n), t)


def test_mode_products_commute():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((3, 4, 2, 2))
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((5, 4))
    np.testing.assert_allclose(mode_n_product(mode_n_product(t, a, 1), b, 2),
                               mode_n_product(mode_n_product(t, b, 2), a, 1), rtol=1e-13, atol=1e-13)


def test_kronecker_examples():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(kronecker(np.eye(2), b),
                                  np.block([[b, np.zeros((2, 2))], [np.zeros((2, 2)), b]]))
    np.testing.assert_array_equal(kronecker(np.array([[1, 2]]), np.array([[3], [4]])), [[3, 6], [4, 8]])


@pytest.mark.parametrize("seed", range(20))
def test_mode4_kronecker_reconstruction(seed):
    rng = np.random.default_rng(seed)
    dims, p = (4, 3, 2), (2, 2, 1)
    core = rng.standard_normal(p + (5,))
    f = [rng.standard_normal((pp, i)) for pp, i in zip(p, dims)]
    lhs = matricize(reconstruct(core, f), 4)
    rhs = matricize(core, 4) @ kron_factors(f)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12
    np.testing.assert_allclose(reconstruct(core, f), recon(core, *f), rtol=1e-12, atol=1e-12)


def test_khatri_rao():
    a = np.array([[1.0], [2.0]])
    b = np.array([[3.0], [4.0], [5.0]])
    np.testing.assert_array_equal(khatri_rao(a, b), kronecker(a, b))
    a2 = np.array([[1.0, 2.0], [3.0, 4.0]])
    b2 = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = np.column_stack([np.kron(a2[:, 0], b2[:, 0]), np.kron(a2[:, 1], b2[:, 1])])
    np.testing.assert_array_equal(khatri_rao(a2, b2), expected)
    with pytest.raises(ValueError):
        khatri_rao(a2, b)


def test_masked_fnorm():
    v = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
    mask = np.ones(v.shape, bool)
    assert masked_fnorm_sq(MaskedTensor(np.zeros_like(v), mask)) == 0
    assert masked_fnorm_sq(MaskedTensor(v, mask)) == 30
    mask[0, 1] = False
    assert masked_fnorm_sq(MaskedTensor(v, mask)) == 26
    t = MaskedTensor(v, mask)
    assert masked_fnorm_sq(project_omega(t)) == masked_fnorm_sq(t)


@settings(max_examples=30, deadline=None)
@given(dims4, st.integers(0, 2**31))
def test_norm_invariant_under_unfolding(dims, seed):
    t = np.random.default_rng(seed).standard_normal(dims)
    ref = np.sqrt(np.sum(t ** 2))
    for n in range(1, 5):
        assert abs(np.linalg.norm(matricize(t, n)) - ref) <= 1e-12 * ref


@settings(max_examples=30, deadline=None)
@given(dims4, st.integers(0, 2**31))
def test_project_omega_idempotent(dims, seed):
    rng = np.random.default_rng(seed)
    t = MaskedTensor(rng.standard_normal(dims), rng.random(dims) < 0.6)
    once = project_omega(t)
    twice = project_omega(once)
    assert np.array_equal(once.values, twice.values)


def test_availability_sets():
    full = np.ones((2, 2, 2, 1), bool)
    a = availability_sets(full, 1)
    assert all(np.array_equal(r, np.arange(4)) for r in a.rows)
    assert a.shared is not None

    img = full.copy()
    img[:, :, 1, 0] = False
    a = availability_sets(img, 1)
    # columns j = i2 + 2*i3 (0-based) with i3 = 1 are gone
    np.testing.assert_array_equal(a.shared, [0, 1])
    assert is_imagewise(img)

    one = full.copy()
    one[1, 0, 1, 0] = False
    a = availability_sets(one, 1)
    assert [len(r) for r in a.rows] == [4, 3]
    assert a.shared is None
    assert not is_imagewise(one)


@settings(max_examples=30, deadline=None)
@given(dims4, st.integers(1, 4), st.integers(0, 2**31))
def test_availability_partition(dims, n, seed):
    mask = np.random.default_rng(seed).random(dims) < 0.5
    a = availability_sets(mask, n)
    w = matricize(mask, n)
    for i, r in enumerate(a.rows):
        assert np.all(np.diff(r) > 0)
        missing = np.flatnonzero(~w[i])
        assert np.array_equal(np.sort(np.concatenate([r, missing])), np.arange(w.shape[1]))


def test_cached_unfoldings_match():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((3, 2, 2, 4))
    mask = rng.random(v.shape) < 0.7
    t = MaskedTensor(v, mask)
    for n in range(1, 5):
        a, w = t.unfold_filled(n)
        np.testing.assert_array_equal(a, matricize(np.where(mask, v, 0), n))
        np.testing.assert_array_equal(w, matricize(mask, n))
