import numpy as np
import pytest

from grainforge.constructions import (CtoCParams, RtoCParams, build_c_to_c, build_r_to_c,
                                      build_r_to_r, build_sharp, construction_energy_per_length,
                                      derive_rr_params, rr_window_half, tile_vertical)
from grainforge.energy import dist2_so2
from grainforge.errors import AlphaTooLargeError, InvalidArgument, ThetaDegenerateError, TilingIncompatibleError
from grainforge.fields import Domain, ModelParams, rasterize, rot, segment_integrals


def loop(f, x0, x1, y0, y1):
    P = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    return segment_integrals(f, P, np.roll(P, -1, axis=0)).sum(axis=0)


def potential_check(f, x, y):
    lab = f.region(x, y)
    e = 1e-6
    num = np.stack([(f.potential(x + e, y, lab) - f.potential(x - e, y, lab)) / (2 * e),
                    (f.potential(x, y + e, lab) - f.potential(x, y - e, lab)) / (2 * e)], -1)
    return np.abs(num - f.evaluate(x, y)).max()


def test_c2c_cell_burgers_vector():
    p = CtoCParams(0.9, 1.1, 0.2, -0.1, 1.0, 0.8, 0.3, 0.2)
    f, S = build_c_to_c(p)
    # anticlockwise: the negative of the clockwise closed form
    want = -2 * p.h * np.array([p.mu - p.mu_t, p.eta - p.eta_t])
    assert np.allclose(loop(f, -1, 1, -0.8, 0.8), want, atol=1e-12)
    # loops that avoid the defect see nothing
    assert np.allclose(loop(f, 0.35, 0.7, 0.1, 0.5), 0, atol=1e-12)


def test_r2c_cell_burgers_vector():
    q = RtoCParams(0.3, 0.9, 0.2, 1.0, 0.8, 0.3, 0.2)
    f, S = build_r_to_c(q)
    b = q.beta
    want = -2 * q.h * np.array([-q.mu - np.sin(b), np.cos(b) - q.eta])
    assert np.allclose(loop(f, -1, 1, -0.8, 0.8), want, atol=1e-12)
    assert np.allclose(loop(f, -0.9, -0.1, 0.3, 1.2), 0, atol=1e-12)


def test_potentials_are_antiderivatives():
    p = CtoCParams(0.9, 1.1, 0.2, -0.1, 1.0, 0.8, 0.3, 0.2)
    f, _ = build_c_to_c(p)
    assert potential_check(f, np.array([0.1, -0.2, 0.8]), np.array([0.6, -0.5, 0.1])) < 1e-7
    q = RtoCParams(0.3, 0.9, 0.2, 1.0, 0.8, 0.3, 0.2)
    g, _ = build_r_to_c(q)
    assert potential_check(g, np.array([-0.8, -0.7, 0.6]), np.array([0.3, -0.4, 0.2])) < 1e-7


def test_cell_param_validation():
    with pytest.raises(InvalidArgument):
        CtoCParams(1, 1, 0, 0, 1.0, 0.5, 0.6, 0.1)
    with pytest.raises(InvalidArgument):
        RtoCParams(0.1, 0.0, 0, 1, 1, 0.1, 0.1)


def test_rr_params_formulas():
    th, a, eps = np.pi / 3, 0.05, 1e-3
    p = derive_rr_params(th, a, eps, 2.0)
    st, ct, sa = np.sin(th), np.cos(th), np.sin(a)
    assert p.eta == pytest.approx(np.cos(a) + ct * st * sa)
    assert p.mu_t == pytest.approx(-st ** 2 * sa)
    assert p.h_D == pytest.approx(2 * eps / (st * sa))
    assert p.h_B == pytest.approx(2 * eps / (ct * sa))
    assert p.half_width == pytest.approx(3 * 2 * eps / sa)


def test_rr_param_preconditions():
    with pytest.raises(ThetaDegenerateError):
        derive_rr_params(0.01, 0.05, 1e-3)
    with pytest.raises(AlphaTooLargeError):
        derive_rr_params(np.pi / 4, 0.2, 1e-3)
    p = derive_rr_params(np.pi / 4, 0.2, 1e-3, strict=False)
    assert p.alpha == 0.2
    with pytest.raises(InvalidArgument):
        derive_rr_params(np.pi / 4, -0.1, 1e-3)
    assert derive_rr_params(np.pi / 4, 0.0, 1e-3).trivial


def test_rr_far_field_is_the_two_rotations():
    th, a = np.pi / 4, 0.05
    p = derive_rr_params(th, a, 1e-3)
    f, _ = build_r_to_r(p)
    W = p.half_width
    ys = np.linspace(-0.3, 0.3, 11)
    left = f.evaluate(np.full(11, -1.01 * W), ys)
    right = f.evaluate(np.full(11, 1.01 * W), ys)
    assert np.allclose(left, rot(th - a), atol=1e-12)
    assert np.allclose(right, rot(th + a), atol=1e-12)


def test_rr_field_is_near_rotations_outside_core():
    p = derive_rr_params(np.pi / 6, 0.05, 1e-3)
    f, S = build_r_to_r(p)
    x = np.linspace(-p.half_width, p.half_width, 201)
    X, Y = np.meshgrid(x, np.linspace(0, p.h_D, 31))
    far = S.distance(X, Y) > 8 * p.eps
    assert dist2_so2(f(X, Y))[far].max() < 0.05


def test_trivial_alpha_gives_constant_rotation():
    p = derive_rr_params(np.pi / 4, 0.0, 1e-3)
    f, S = build_r_to_r(p)
    assert S.is_empty
    assert np.allclose(f.evaluate(np.array([0.3]), np.array([0.1])), rot(np.pi / 4))


def test_construction_energy_below_sharp_for_small_angles():
    P = ModelParams(1e-3)
    v, info = construction_energy_per_length(np.pi / 4, 0.02, P)
    assert info["kind"] == "construction"
    assert 0 < v < 2 * P.lam
    v2, info2 = construction_energy_per_length(np.pi / 4, 0.3, P)
    assert info2["kind"] == "sharp" and v2 == 2.0
    assert construction_energy_per_length(np.pi / 4, 0.0, P)[0] == 0.0


def test_construction_energy_scale_free_in_eps():
    # all lengths scale with eps, so the normalized energy per length is eps-independent
    a = construction_energy_per_length(np.pi / 4, 0.05, ModelParams(1e-3))[0]
    b = construction_energy_per_length(np.pi / 4, 0.05, ModelParams(1e-2))[0]
    assert a == pytest.approx(b, rel=1e-6)


def test_window_holds_whole_periods():
    p = derive_rr_params(np.pi / 4, 0.05, 1e-3)
    L = rr_window_half(p)
    assert (2 * L / p.h_B) == pytest.approx(round(2 * L / p.h_B))
    assert (2 * L / p.h_D) == pytest.approx(round(2 * L / p.h_D))


def test_tile_vertical_grid_and_analytic():
    f, S = build_sharp(0.1, 0.3, (-1, 1))
    d = Domain(-1, 1, -1, 1, 0.125)
    g = rasterize(f, d)
    t, T = tile_vertical(g, Domain(-1, 1, -1, 1), S)
    assert t.values.shape[0] == 2 * g.values.shape[0]
    assert np.array_equal(t.values[:16], t.values[16:])
    a = tile_vertical(f, Domain(-1, 1, -1, 1))
    assert np.allclose(a.evaluate(np.array([-0.5, 0.5]), np.array([3.3, -5.1])),
                       f.evaluate(np.array([-0.5, 0.5]), np.array([0.0, 0.0])))


def test_tile_vertical_rejects_mismatch():
    d = Domain(0, 1, 0, 1, 0.25)
    g = rasterize(build_sharp(0.1, 0.3, (-1, 1))[0], d)
    g.values[0, 0, 0, 0] += 1.0
    with pytest.raises(TilingIncompatibleError):
        tile_vertical(g, Domain(0, 1, 0, 1))
