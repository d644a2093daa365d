import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ratpad import features as F


def jacobi_eig(a, sweeps=100):
    """Cyclic Jacobi rotations; an eigensolver independent of LAPACK."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum((a - np.diag(np.diag(a))) ** 2))
        if off < 1e-14:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta else 1.0
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order].T


def _naive_cov(x):
    n, d = x.shape
    mean = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    c = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            c[a, b] = sum((x[i, a] - mean[a]) * (x[i, b] - mean[b]) for i in range(n)) / (n - 1)
    return c


# temporal averaging ------------------------------------------------------

def test_temporal_average_cases(rng):
    g = rng.normal(size=(3, 3, 6))
    assert np.array_equal(F.temporal_average([g]), g)
    assert np.all(F.temporal_average([np.zeros((2, 2, 3)), np.full((2, 2, 3), 2.0)]) == 1.0)
    stack = rng.normal(size=(5, 2, 3, 6))
    naive = np.zeros((2, 3, 6))
    for t in range(5):
        naive += stack[t]
    np.testing.assert_allclose(F.temporal_average(list(stack)), naive / 5, atol=1e-12)
    with pytest.raises(ValueError):
        F.temporal_average([])
    with pytest.raises(ValueError):
        F.temporal_average([np.zeros((2, 2)), np.zeros((3, 2))])


# standardisers ---------------------------------------------------------------

def test_two_point_standardizer():
    s = F.Standardizer.fit(np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)]))
    assert np.all(s.mean == 1) and np.all(s.std == 1)
    assert set(s.transform(np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])).ravel()) == {-1, 1}


def test_constant_cell_maps_to_zero(rng):
    data = rng.normal(size=(6, 3))
    data[:, 1] = 4.2
    s = F.Standardizer.fit(data)
    assert s.std[1] == F.STD_FLOOR
    assert np.all(s.transform(data)[:, 1] == 0.0)
    assert np.all(s.transform(data + 5.0)[:, 1] == 0.0)


def test_standardizer_matches_two_pass(rng):
    data = rng.normal(3, 2, size=(20, 4, 3))
    s = F.Standardizer.fit(data)
    mean = data.sum(0) / len(data)
    var = ((data - mean) ** 2).sum(0) / len(data)
    np.testing.assert_allclose(s.mean, mean, atol=1e-9)
    np.testing.assert_allclose(s.std, np.sqrt(var), atol=1e-9)
    with pytest.raises(ValueError, match="insufficient"):
        F.Standardizer.fit(data[:1])


def test_feature_standardizer_cases(rng):
    rows = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, 4.0]])
    fs = F.fit_feature_standardizer(rows)
    z = fs.transform(rows)
    assert set(z[:, 0]) == {-1.0, 1.0} and set(z[:, 2]) == {-1.0, 1.0}
    assert np.all(z[:, 1] == 0)
    assert np.all(fs.transform(rows.mean(0)) == 0)


# PCA -------------------------------------------------------------------------

def test_axis_aligned_cloud():
    x = np.column_stack([np.linspace(-3, 3, 9), np.zeros(9)])
    p = F.fit_pca(x, 2)
    np.testing.assert_allclose(np.abs(p.components[0]), [1, 0], atol=1e-12)
    assert p.explained_variance[1] == pytest.approx(0.0, abs=1e-12)


def test_identical_data_has_zero_variance():
    p = F.fit_pca(np.tile([1.0, 2.0, 3.0], (5, 1)), 2)
    assert np.all(p.explained_variance == 0)


def test_pca_matches_jacobi_oracle(rng):
    x = rng.normal(size=(10, 6)) @ rng.normal(size=(6, 6))
    p = F.fit_pca(x, 6)
    evals, evecs = jacobi_eig(_naive_cov(x))
    np.testing.assert_allclose(p.explained_variance, evals, atol=1e-8)
    for got, want in zip(p.components, evecs):
        assert min(np.abs(got - want).max(), np.abs(got + want).max()) < 1e-8


def test_gram_route_matches_jacobi_oracle(rng):
    # D > n goes through the Gram matrix
    x = rng.normal(size=(7, 15))
    p = F.fit_pca(x, 6)
    evals, evecs = jacobi_eig(_naive_cov(x))
    np.testing.assert_allclose(p.explained_variance, evals[:6], atol=1e-8)
    for got, want in zip(p.components, evecs[:6]):
        assert min(np.abs(got - want).max(), np.abs(got + want).max()) < 1e-7
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(6), atol=1e-10)


def test_gram_route_pads_rank_deficient(rng):
    x = np.repeat(rng.normal(size=(2, 12)), 3, axis=0)  # rank 1 after centring
    p = F.fit_pca(x, 4)
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(4), atol=1e-10)
    assert np.all(p.explained_variance[1:] == 0)


def test_sign_convention(rng):
    p = F.fit_pca(rng.normal(size=(12, 5)), 3)
    for c in p.components:
        assert c[np.argmax(np.abs(c))] > 0


def test_pca_errors(rng):
    with pytest.raises(ValueError):
        F.fit_pca(rng.normal(size=(1, 3)))
    with pytest.raises(ValueError, match="exceeds"):
        F.fit_pca(rng.normal(size=(4, 3)), 5)


# projection ----------------------------------------------------------------

def test_projection_cases(rng):
    x = rng.normal(size=(8, 5))
    p = F.fit_pca(x, 3)
    f = F.project(p, p.mean)
    assert np.all(f.coords == 0) and f.residual == 0
    inside = p.mean + p.components.T @ np.array([1.0, -2.0, 0.5])
    assert F.project(p, inside).residual == pytest.approx(0.0, abs=1e-9)
    v = rng.normal(size=5)
    f = F.project(p, v)
    assert f.residual ** 2 == pytest.approx(np.sum((v - p.mean) ** 2) - np.sum(f.coords ** 2),
                                            abs=1e-6)
    np.testing.assert_allclose(F.project_many(p, v[None])[0], f.vector(), atol=1e-12)
    with pytest.raises(ValueError):
        F.project(p, np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)), st.integers(1, 4))
def test_residual_pythagoras_property(x, m):
    p = F.fit_pca(x, m)
    rows = F.project_many(p, x)
    total = np.sum((x - p.mean) ** 2, axis=1)
    np.testing.assert_allclose(rows[:, -1] ** 2 + np.sum(rows[:, :-1] ** 2, axis=1), total,
                               rtol=1e-7, atol=1e-7)
    assert np.all(rows[:, -1] >= 0)


def test_standardize_feature_object(rng):
    p = F.fit_pca(rng.normal(size=(8, 5)), 3)
    feats = [F.project(p, v) for v in rng.normal(size=(6, 5))]
    fs = F.fit_feature_standardizer(feats)
    z = F.standardize(fs, feats[0])
    assert z.standardized and len(z) == 4
    with pytest.raises(ValueError):
        F.standardize(fs, z)


# pipeline & persistence ------------------------------------------------------

def test_pipeline_roundtrip(rng):
    train = rng.normal(size=(10, 3, 3, 6))
    dev = rng.normal(size=(4, 3, 3, 6))
    fp = F.fit_pipeline(train, dev)
    assert fp.pca.m == 9
    blob = F.pack_arrays("k", {"grid_shape": list(fp.grid_shape)}, F.pipeline_arrays(fp))
    header, arrays_ = F.unpack_arrays(blob, "k")
    fp2 = F.pipeline_from_arrays(header, arrays_)
    probe = rng.normal(size=(3, 3, 3, 6))
    assert np.array_equal(fp.transform(probe), fp2.transform(probe))
    np.testing.assert_allclose(fp.transform(dev).mean(0), 0, atol=1e-9)
    with pytest.raises(ValueError):
        F.unpack_arrays(blob, "other")
    with pytest.raises(ValueError):
        F.unpack_arrays(b"XXXXXXXX" + blob[8:], "k")
    with pytest.raises(ValueError):
        F.unpack_arrays(blob + b"\0", "k")
