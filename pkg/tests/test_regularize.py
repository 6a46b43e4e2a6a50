import numpy as np
import pytest
from scipy import ndimage

from grainforge.circulation import discrete_curl, grad_c
from grainforge.energy import dist2_so2
from grainforge.errors import ResolutionError
from grainforge.fields import DefectSet, Domain, GridField, ModelParams, constant_grid, rot
from grainforge.regularize import (SUP_BOUND, bad_set, cof_gap, harmonic_replace, mollify_curl,
                                   regularize, truncate)

EPS = 0.05
N = 96
H = EPS / 4


def dom():
    return Domain(0, N * H, 0, N * H, H)


def gradient_field(rng, theta=0.3, amp=0.02):
    """R + grad_c w with w a windowed sum of sines (curl-free away from S)."""
    xs = (np.arange(-1, N + 1) + 0.5) * H
    Xp, Yp = np.meshgrid(xs, xs)
    w = np.zeros((N + 2, N + 2, 2))
    for _ in range(4):
        a = rng.normal(size=2) * amp
        kx, ky = rng.integers(1, 4, 2)
        w += (a * np.sin(2 * np.pi * kx * Xp / (N * H) + rng.uniform(0, 6))[..., None]
              * np.sin(2 * np.pi * ky * Yp / (N * H))[..., None])
    win = np.clip(np.minimum.reduce([Xp, Yp, N * H - Xp, N * H - Yp]) / (8 * H) - 0.5, 0, 1) ** 3
    w = w * win[..., None]
    gx = (w[1:-1, 2:] - w[1:-1, :-2]) / (2 * H)
    gy = (w[2:, 1:-1] - w[:-2, 1:-1]) / (2 * H)
    return rot(theta) + np.stack([gx, gy], -1)


def field_with_defect(rng):
    A = gradient_field(rng)
    m = np.zeros((N, N), bool)
    m[40:46, 50:53] = True
    A[m] += rng.normal(size=(m.sum(), 2, 2)) * 0.5
    S = DefectSet.from_mask(ndimage.binary_dilation(m, iterations=2), dom())
    return GridField(dom(), A), S


def spike_field(size=30):
    A = constant_grid(dom(), rot(0.2)).values.copy()
    w = np.zeros((N, N, 2))
    w[48, 48] = [size * H, 0]
    return GridField(dom(), A + grad_c(w, H))


def test_cof_gap_bounded_by_dist2(rng):
    m = rng.normal(size=(200, 2, 2))
    assert np.all(cof_gap(m) <= 4 * dist2_so2(m) + 1e-12)
    assert np.allclose(cof_gap(rot(0.4)), 0)


def test_bad_set_empty_for_rotation():
    rep = bad_set(constant_grid(dom(), rot(0.1)), DefectSet(), ModelParams(EPS))
    assert not rep.E.any() and rep.measure == 0 and rep.constant == 0


def test_bad_set_finds_spike_and_checks_resolution():
    P = ModelParams(EPS)
    rep = bad_set(spike_field(), DefectSet(), P)
    assert rep.E[48, 47:50].any()
    assert rep.measure > 0 and np.isfinite(rep.constant)
    with pytest.raises(ResolutionError):
        bad_set(spike_field(), DefectSet(), ModelParams(EPS / 2))


def test_bad_set_ignores_core():
    P = ModelParams(EPS)
    g = spike_field()
    S = DefectSet(points=[(48.5 * H, 48.5 * H)])
    rep = bad_set(g, S, P)
    assert not rep.U.any()


def test_truncate_keeps_curl_and_bounds_sup():
    P = ModelParams(EPS)
    g = spike_field()
    g2, S2, info = truncate(g, DefectSet(), P)
    assert info["modified_cells"] > 0
    assert np.abs(discrete_curl(g2) - discrete_curl(g)).max() < 1e-9
    assert np.abs(g2.values).max() <= SUP_BOUND
    assert dist2_so2(g2.values).max() < dist2_so2(g.values).max()
    assert len(S2) > 0


def test_truncate_noop_without_bad_cells():
    P = ModelParams(EPS)
    g = constant_grid(dom(), rot(0.1))
    g2, S2, info = truncate(g, DefectSet(), P)
    assert np.array_equal(g2.values, g.values) and info["modified_cells"] == 0


def test_mollify_curl_is_local(rng):
    P = ModelParams(EPS)
    f, S = field_with_defect(rng)
    g, S2, info = mollify_curl(f, S, P)
    X, Y = f.centers()
    far = S.distance(X, Y) > 1.75 * P.core_radius + 2 * H
    assert np.array_equal(g.values[far], f.values[far])
    assert info["curl_sup_inside"] <= info["curl_bound"]
    # S″ contains every cell within 2λε of S
    assert np.all(S2.distance(X, Y)[S.distance(X, Y) <= 2 * P.core_radius] == 0)


def test_mollify_needs_resolution():
    with pytest.raises(ResolutionError):
        mollify_curl(constant_grid(Domain(0, 1, 0, 1, 0.1), np.eye(2)), DefectSet(), ModelParams(0.1))


def test_harmonic_removes_a_compact_gradient():
    P = ModelParams(EPS)
    u = np.zeros((N, N, 2))
    X, Y = np.meshgrid(np.arange(N), np.arange(N))
    r2 = ((X - 48) ** 2 + (Y - 40) ** 2) / 100.0
    u[..., 0] = np.where(r2 < 1, (1 - r2) ** 3, 0) * 0.05
    u[..., 1] = -0.5 * u[..., 0]
    A = rot(0.7) + grad_c(u, H)
    out, info = harmonic_replace(GridField(dom(), A), DefectSet(), P, report=True)
    assert np.abs(out.values - rot(0.7)).max() < 1e-9
    assert info["grad_z_sq"] == pytest.approx(np.sum(grad_c(u, H) ** 2) * H * H, rel=1e-8)


def test_harmonic_residuals_and_energy(rng):
    P = ModelParams(EPS)
    f, S = field_with_defect(rng)
    out, info = harmonic_replace(f, S, P, report=True)
    assert info["div_residual"] <= 1e-6
    assert info["curl_residual"] <= 1e-6
    assert info["grad_z_sq"] <= info["energy_bound"] + 1e-8
    X, Y = f.centers()
    inS = S.distance(X, Y) <= 0
    assert np.array_equal(out.values[inS], f.values[inS])


def test_regularize_pipeline_reports_every_stage(rng):
    P = ModelParams(EPS)
    f, S = field_with_defect(rng)
    f3, S3, rep = regularize(f, S, P)
    names = [s["stage"] for s in rep["stages"]]
    assert names == ["input", "truncate", "mollify_curl", "harmonic_replace"]
    assert rep["stages"][0]["energy_ratio"] == 1.0
    assert all(np.isfinite(s["sup_norm"]) for s in rep["stages"])
    assert f3.values.shape == f.values.shape
