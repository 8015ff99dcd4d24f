import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from gvsl import geometry as G
from gvsl.autodiff import ShapeError


def printed_product(v):
    """Brute-force oracle: build each factor matrix independently and multiply."""
    rx, ry, rz, tx, ty, tz, sx, sy, sz, xy, xz, yx, yz, zx, zy = v
    Rx = np.array([[1, 0, 0, 0], [0, np.cos(rx), -np.sin(rx), 0], [0, np.sin(rx), np.cos(rx), 0], [0, 0, 0, 1]])
    Ry = np.array([[np.cos(ry), 0, np.sin(ry), 0], [0, 1, 0, 0], [-np.sin(ry), 0, np.cos(ry), 0], [0, 0, 0, 1]])
    Rz = np.array([[np.cos(rz), -np.sin(rz), 0, 0], [np.sin(rz), np.cos(rz), 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    S = np.diag([sx, sy, sz, 1.0])
    Sh = np.array([[1, yx, zx, 0], [xy, 1, zy, 0], [xz, yz, 1, 0], [0, 0, 0, 1]])
    T = np.eye(4)
    T[:3, 3] = [tx, ty, tz]
    return Rz @ Ry @ Rx @ S @ Sh @ T


def random_params(rng):
    v = np.concatenate([rng.uniform(-0.5, 0.5, 3), rng.uniform(-3, 3, 3), rng.uniform(0.7, 1.3, 3),
                        rng.uniform(-0.2, 0.2, 6)])
    return v


def test_identity_params_give_identity_matrix():
    assert np.array_equal(G.affine_matrix_from_params(G.AffineParams()), np.eye(4))


def test_quarter_turn_about_z():
    M = G.affine_matrix_from_params(G.AffineParams(rotation=(0, 0, np.pi / 2)))
    np.testing.assert_allclose(M @ [1, 0, 0, 1], [0, 1, 0, 1], atol=1e-15)


def test_matrix_matches_factor_product(rng):
    for _ in range(20):
        v = random_params(rng)
        M = G.affine_matrix_from_params(v)
        np.testing.assert_allclose(M, printed_product(v), atol=1e-14)
        assert np.array_equal(M[3], [0, 0, 0, 1])


def test_non_positive_scale_rejected():
    with pytest.raises(ValueError):
        G.AffineParams(scaling=(1.0, 0.0, 1.0))
    v = G.AffineParams().to_vector()
    v[7] = -1
    with pytest.raises(ValueError):
        G.affine_matrix_from_params(v)


def test_params_round_trip(rng):
    p = G.AffineParams.from_vector(random_params(rng))
    assert G.AffineParams.from_dict(p.to_dict()) == p
    assert np.array_equal(G.AffineParams.from_vector(p.to_vector()).to_vector(), p.to_vector())


# -- fields ---------------------------------------------------------------------

def test_identity_matrix_gives_zero_field():
    assert not G.affine_to_dvf(np.eye(4), G.VolumeGrid((4, 5, 6))).any()


def test_translation_gives_constant_field():
    M = G.affine_matrix_from_params(G.AffineParams(translation=(2, 0, 0)))
    f = G.affine_to_dvf(M, (6, 6, 6))
    assert np.all(f[0] == 2) and not f[1:].any()


def test_rotation_field_per_voxel(rng):
    M = G.affine_matrix_from_params(G.AffineParams(rotation=(0, 0, np.pi / 2)))
    f = G.affine_to_dvf(M, (5, 5, 5))
    c = np.array([2.0, 2.0, 2.0])
    for z in range(5):
        for y in range(5):
            for x in range(5):
                p = np.array([x, y, z], float)
                ph = (M @ np.append(p - c, 1))[:3] + c
                np.testing.assert_allclose(f[:, z, y, x], ph - p, atol=1e-12)


def test_zero_dvf_warp_is_exact(rng):
    src = rng.standard_normal((2, 5, 6, 7))
    assert np.array_equal(G.warp_trilinear(src, np.zeros((3, 5, 6, 7))), src)


def test_identity_affine_round_trip_exact(rng):
    src = rng.standard_normal((1, 6, 6, 6))
    dvf = G.affine_to_dvf(G.affine_matrix_from_params(G.AffineParams()), (6, 6, 6))
    assert np.array_equal(G.warp_trilinear(src, dvf), src)


def test_integer_shift_on_ramp():
    src = np.tile(np.arange(6.0), (4, 5, 1))[None]
    dvf = np.zeros((3, 4, 5, 6))
    dvf[0] = 1
    out = G.warp_trilinear(src, dvf)[0]
    np.testing.assert_array_equal(out[..., :-1], src[0][..., 1:])
    assert not out[..., -1].any()


def test_half_voxel_midpoint():
    src = np.zeros((1, 3, 3, 2))
    src[0, ..., 0], src[0, ..., 1] = 0.2, 0.8
    dvf = np.zeros((3, 3, 3, 2))
    dvf[0] = 0.5
    assert np.allclose(G.warp_trilinear(src, dvf)[0, ..., 0], 0.5)


def test_warp_shape_mismatch():
    with pytest.raises(ShapeError):
        G.warp_trilinear(np.zeros((1, 4, 4, 4)), np.zeros((3, 4, 4, 5)))


def test_compose_identity_affine_returns_deform(rng):
    d = rng.standard_normal((3, 5, 5, 5))
    np.testing.assert_array_equal(G.compose_dvf(np.eye(4), d), d)


def test_compose_translation_zero_deform():
    M = G.affine_matrix_from_params(G.AffineParams(translation=(2, 0, 0)))
    f = G.compose_dvf(M, np.zeros((3, 6, 6, 6)))
    assert np.all(f[0] == 2) and not f[1:].any()


def test_compose_translation_with_ramp_deform():
    M = G.affine_matrix_from_params(G.AffineParams(translation=(1.5, 0, 0)))
    d = np.zeros((3, 4, 4, 10))
    d[0] = 0.1 * np.arange(10.0)
    f = G.compose_dvf(M, d)
    px = np.arange(10.0)
    interior = px + 1.5 <= 9  # sample stays inside the grid
    np.testing.assert_allclose(f[0, 1, 1, interior], 0.1 * (px[interior] + 1.5) + 1.5, atol=1e-12)


def test_compose_zero_deform_equals_affine_field(rng):
    for _ in range(5):
        M = G.affine_matrix_from_params(random_params(rng))
        np.testing.assert_allclose(G.compose_dvf(M, np.zeros((3, 7, 7, 7))), G.affine_to_dvf(M, (7, 7, 7)),
                                   atol=1e-12)


def test_inverse_affine_round_trip_within_interpolation_error(rng):
    n = 24
    z, y, x = np.meshgrid(*(np.arange(n, dtype=float),) * 3, indexing="ij")
    vol = np.sin(x / 4) * np.cos(y / 5) + 0.3 * np.sin(z / 3)
    M = G.affine_matrix_from_params(G.AffineParams(rotation=(0.1, -0.05, 0.15), translation=(1.2, -0.7, 0.4),
                                                   scaling=(1.05, 0.95, 1.0)))
    once = G.warp_trilinear(vol[None], G.affine_to_dvf(M, (n, n, n)))
    back = G.warp_trilinear(once, G.affine_to_dvf(np.linalg.inv(M), (n, n, n)))[0]
    second = max(np.abs(np.diff(vol, 2, axis=a)).max() for a in range(3))
    core = (slice(6, -6),) * 3
    err = np.abs(back[core] - vol[core]).max()
    print(f"inverse round trip max error {err:.4g}, bound {2 * second:.4g}")
    assert err <= 2 * second


def test_warp_nearest_keeps_labels_integral(rng):
    lab = rng.integers(0, 4, (5, 5, 5)).astype(np.int32)
    dvf = np.zeros((3, 5, 5, 5))
    dvf[1] = 1.2  # rounds to one voxel
    out = G.warp_nearest(lab, dvf)
    assert out.dtype == lab.dtype
    np.testing.assert_array_equal(out[:, :-1], lab[:, 1:])
    assert not out[:, -1].any()


def test_translate_matches_constant_field(rng):
    v = rng.standard_normal((6, 6, 6))
    out = G.translate(v, (1, 0, 0))
    np.testing.assert_array_equal(out[..., :-1], v[..., 1:])


# -- Jacobian ---------------------------------------------------------------------

def test_jacobian_of_zero_field_is_one():
    assert np.all(G.jacobian_determinant(np.zeros((3, 4, 5, 6))) == 1.0)


def test_jacobian_uniform_scaling():
    n = 6
    q = G._centered_coords((n, n, n))
    jd = G.jacobian_determinant(0.1 * q)
    np.testing.assert_allclose(jd[:-1, :-1, :-1], 1.331, atol=1e-12)


def test_jacobian_matches_per_voxel_determinant(rng):
    u = np.stack([gaussian_filter(rng.standard_normal((6, 6, 6)), 1.5) for _ in range(3)])
    jd = G.jacobian_determinant(u)
    for z in range(5):
        for y in range(5):
            for x in range(5):
                J = np.eye(3)
                for i in range(3):
                    J[i, 0] += u[i, z, y, x + 1] - u[i, z, y, x]
                    J[i, 1] += u[i, z, y + 1, x] - u[i, z, y, x]
                    J[i, 2] += u[i, z + 1, y, x] - u[i, z, y, x]
                assert abs(jd[z, y, x] - np.linalg.det(J)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_matrix_product_property(seed):
    v = random_params(np.random.default_rng(seed))
    np.testing.assert_allclose(G.affine_matrix_from_params(v), printed_product(v), atol=1e-13)
