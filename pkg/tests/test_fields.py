import numpy as np
import pytest

from grainforge.errors import DegenerateSampleError, DomainMismatchError, InvalidArgument
from grainforge.fields import (AnalyticField, ConstantField, DefectSet, Domain, GridField, Matrix2,
                               ModelParams, Rotation2, SharpInterfaceField, constant_grid, rasterize,
                               read_grid, rot, segment_integrals, write_grid)


def test_rotation_matrix_and_composition():
    r = Rotation2(0.3) @ Rotation2(0.4)
    assert np.allclose(r.matrix, rot(0.7))
    assert np.allclose(Rotation2(0.3).inverse().matrix @ rot(0.3), np.eye(2))


def test_rotation_distance_matches_frobenius():
    a, b = Rotation2(0.2), Rotation2(1.1)
    assert a.distance(b) == pytest.approx(np.linalg.norm(a.matrix - b.matrix), abs=1e-14)


def test_matrix_rejects_nan():
    with pytest.raises(InvalidArgument):
        Matrix2(1.0, np.nan, 0.0, 1.0)


def test_domain_checks_spacing():
    d = Domain(0, 1, 0, 2, 0.25)
    assert (d.nx, d.ny) == (4, 8)
    with pytest.raises(InvalidArgument):
        Domain(0, 1, 0, 1, 0.3)
    with pytest.raises(InvalidArgument):
        Domain(1, 0, 0, 1)


def test_model_params_validation():
    p = ModelParams(0.01, 2.0, 1.5)
    assert p.core_radius == pytest.approx(0.015)
    assert p.burgers == pytest.approx(0.02)
    with pytest.raises(InvalidArgument):
        ModelParams(0.01, lam=0.5)
    with pytest.raises(InvalidArgument):
        ModelParams(0.0)


def test_defect_distance_to_box_and_segment():
    S = DefectSet(rectangles=[(0, 1, 0, 1)], segments=[((3, 0), (3, 2))])
    d = S.distance(np.array([2.0, -1.0, 3.0, 1.5]), np.array([0.5, -1.0, 4.0, 0.5]))
    assert np.allclose(d, [1.0, np.sqrt(2), 2.0, 0.5])


def test_defect_rejects_diagonal_segment():
    with pytest.raises(InvalidArgument):
        DefectSet(segments=[((0, 0), (1, 1))])


def test_components_merge_within_twice_radius():
    S = DefectSet(points=[(0, 0), (0.15, 0), (1, 1)])
    assert S.components(0.1) == [[0, 1], [2]]
    assert S.components(0.05) == [[0], [1], [2]]


def test_neighborhood_area_of_a_point_is_a_disc():
    S = DefectSet(points=[(0, 0)])
    a = S.neighborhood_area(0.1, Domain(-1, 1, -1, 1))
    assert a == pytest.approx(np.pi * 0.01, rel=1e-9)


def test_neighborhood_area_of_segment_is_stadium():
    S = DefectSet(segments=[((0, 0), (1, 0))])
    a = S.neighborhood_area(0.1, Domain(-1, 2, -1, 1))
    assert a == pytest.approx(0.2 + np.pi * 0.01, rel=1e-9)


def test_neighborhood_area_shapely_path_agrees():
    boxes = [(0.1 * k, 0.1 * k + 0.02, 0, 0.5) for k in range(5)]
    S = DefectSet(rectangles=boxes)
    w = Domain(-0.5, 1.0, -0.5, 1.0)
    exact = S.neighborhood_area(0.03, w)
    approx = S.neighborhood_area(0.03, w, exact_limit=0)
    assert approx == pytest.approx(exact, rel=1e-4)


def test_defect_dict_roundtrip():
    S = DefectSet(rectangles=[(0, 1, 0, 2)], segments=[((0, 3), (1, 3))], points=[(5, 5)],
                  polygons=[[(0, 0), (1, 0), (0, 1)]])
    T = DefectSet.from_dict(S.to_dict())
    assert np.array_equal(S.boxes, T.boxes) and S.kinds == T.kinds and S.polygons == T.polygons


def test_from_mask_covers_exactly_the_cells():
    d = Domain(0, 1, 0, 1, 0.125)
    m = np.zeros((8, 8), bool)
    m[2:5, 3:6] = True
    m[6, 0] = True
    S = DefectSet.from_mask(m, d)
    X, Y = np.meshgrid(*d.centers())
    assert np.array_equal(S.distance(X, Y) == 0, m)


def test_segment_integrals_of_constant_field():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    f = ConstantField(m)
    out = segment_integrals(f, np.array([[0, 0], [1, 1]]), np.array([[2, 0], [1, -1]]))
    assert np.allclose(out, [m @ [2, 0], m @ [0, -2]])


def test_sharp_interface_integral_across_jump():
    f = SharpInterfaceField(rot(0.1), rot(0.4), 0.5)
    v = segment_integrals(f, np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))[0]
    assert np.allclose(v, 0.5 * rot(0.1)[:, 0] + 0.5 * rot(0.4)[:, 0])


def test_rasterize_center_picks_right_value_on_interface():
    f = SharpInterfaceField(rot(0.0), rot(0.5), 0.5)
    g = rasterize(f, Domain(0, 1, 0, 1, 0.25))
    assert np.allclose(g.values[:, :2], np.eye(2))
    assert np.allclose(g.values[:, 2:], rot(0.5))


def test_rasterize_segment_mode_averages_columns():
    f = SharpInterfaceField(rot(0.0), rot(0.5), 0.5)
    g = rasterize(f, Domain(0, 1, 0, 1, 0.25), mode="segment")
    # the cell at x = 0.375 sees the interface over 1/4 of its 2h mid-line
    col = g.values[0, 1, :, 0]
    assert np.allclose(col, 0.75 * np.array([1, 0]) + 0.25 * rot(0.5)[:, 0])


def test_rasterize_reports_nonfinite_cell():
    class Bad(ConstantField):
        def evaluate(self, x, y):
            out = super().evaluate(x, y)
            out[np.asarray(x) > 0.5] = np.nan
            return out

    with pytest.raises(DegenerateSampleError):
        rasterize(Bad(np.eye(2)), Domain(0, 1, 0, 1, 0.25))


def test_grid_roundtrip_binary_and_csv(tmp_path, rng):
    d = Domain(-1, 1, 0, 0.5, 0.25)
    g = GridField(d, rng.normal(size=(d.ny, d.nx, 2, 2)))
    for name in ("g.bin", "g.csv"):
        write_grid(tmp_path / name, g)
        back = read_grid(tmp_path / name)
        assert back.domain == d
        assert np.array_equal(back.values, g.values)


def test_grid_shape_mismatch():
    with pytest.raises(InvalidArgument):
        GridField(Domain(0, 1, 0, 1, 0.5), np.zeros((3, 2, 2, 2)))


def test_window_outside_domain():
    g = constant_grid(Domain(0, 1, 0, 1, 0.5), np.eye(2))
    with pytest.raises(DomainMismatchError):
        g.window_mask(Domain(0, 2, 0, 1))


def test_analytic_call_broadcasts():
    f = ConstantField(rot(0.2))
    v = f(np.zeros((3, 4)), 1.0)
    assert v.shape == (3, 4, 2, 2)
    assert isinstance(f, AnalyticField)
