"""Distance to SO(2), elastic and core energies, and F_eps."""
from dataclasses import dataclass

import numpy as np

from .fields import GridField, as_array
from .quadrature import adaptive_intervals, sweep_y


def dist2_so2(m):
    """min over rotations R of |m - R|^2, for one matrix or a stack (..., 2, 2)."""
    a = as_array(m)
    p = a[..., 0, 0] + a[..., 1, 1]
    q = a[..., 1, 0] - a[..., 0, 1]
    return np.maximum((a * a).sum(axis=(-2, -1)) + 2.0 - 2.0 * np.hypot(p, q), 0.0)


def nearest_rotation(m):
    a = as_array(m)
    p = a[..., 0, 0] + a[..., 1, 1]
    q = a[..., 1, 0] - a[..., 0, 1]
    s = np.hypot(p, q)
    safe = np.where(s > 0, s, 1.0)
    c = np.where(s > 0, p / safe, 1.0)
    sn = np.where(s > 0, q / safe, 0.0)
    return np.stack([np.stack([c, -sn], -1), np.stack([sn, c], -1)], -2)


def dist2_grad(m):
    """Gradient of dist2_so2 in the matrix entries; at p = q = 0, where the
    nearest rotation is not unique, 2m is returned."""
    a = as_array(m)
    p = a[..., 0, 0] + a[..., 1, 1]
    q = a[..., 1, 0] - a[..., 0, 1]
    s = np.hypot(p, q)
    r = nearest_rotation(a) * (s > 0)[..., None, None]
    return 2.0 * (a - r)


def cofactor(m):
    a = as_array(m)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 0, 1] = -a[..., 1, 0]
    out[..., 1, 0] = -a[..., 0, 1]
    out[..., 1, 1] = a[..., 0, 0]
    return out


@dataclass(frozen=True)
class EnergyBreakdown:
    elastic: float
    core: float
    total: float
    normalized: float

    @classmethod
    def make(cls, elastic, core, eps):
        total = elastic + core
        return cls(float(elastic), float(core), float(total), float(total / eps))

    def to_dict(self, params=None):
        d = {"elastic": self.elastic, "core": self.core, "total": self.total,
             "normalized": self.normalized}
        if params is not None:
            d["params"] = params.to_dict()
        return d


def _grid_in_play(field, defects, window, params):
    mask = field.window_mask(window)
    if not defects.is_empty:
        X, Y = field.centers()
        near = defects.restricted(window, params.core_radius + field.h)
        if not near.is_empty:
            mask &= near.distance(X, Y) > params.core_radius
    return mask


def _analytic_elastic(field, defects, window, params, rtol):
    d = params.core_radius
    xa, xb = window.x_min, window.x_max
    sub = defects.restricted(window, d)

    def inner(y):
        n = y.size
        fb = np.asarray(field.hbreaks(y, xa, xb), float).reshape(n, -1)
        if len(sub.boxes):
            lo, hi = sub.hcover(y, d)
        else:
            lo = hi = np.empty((n, 0))
        ends = np.concatenate([np.full((n, 1), xa), np.full((n, 1), xb), fb, lo, hi], axis=1)
        ends = np.clip(np.where(np.isfinite(ends), ends, xa), xa, xb)
        ends.sort(axis=1)
        a, b = ends[:, :-1], ends[:, 1:]
        mid = 0.5 * (a + b)
        live = b > a
        if lo.shape[1]:
            inside = ((mid[:, :, None] >= lo[:, None, :]) & (mid[:, :, None] <= hi[:, None, :]))
            live &= ~inside.any(axis=2)
        rows = np.nonzero(live)[0]
        aa, bb = a[live], b[live]
        ys = y[rows]

        def g(t, own):
            return dist2_so2(field.evaluate(t, ys[own]))

        vals = adaptive_intervals(g, aa, bb, rtol=rtol * 0.1, atol=1e-15 * (xb - xa), order=10)
        return np.bincount(rows, weights=vals, minlength=n)

    breaks = np.concatenate([np.asarray(field.ybreaks(window.y_min, window.y_max), float),
                             sub.ybreaks(d)])
    return sweep_y(inner, window.y_min, window.y_max, breaks, rtol=rtol,
                   atol=1e-14 * window.area)


def elastic_energy(field, defects, window, params, rtol=1e-9):
    """∫ dist²(A, SO(2)) over window minus the closed λε-neighborhood of S.

    Grid fields use the midpoint rule with membership decided by cell
    centers. Analytic fields are integrated by an adaptive sweep that splits
    at every region boundary and at the edges of the excluded neighborhood.
    """
    if isinstance(field, GridField):
        mask = _grid_in_play(field, defects, window, params)
        return float(dist2_so2(field.values[mask]).sum() * field.h ** 2)
    return float(_analytic_elastic(field, defects, window, params, rtol))


def core_energy(defects, window, params):
    return float(defects.neighborhood_area(params.core_radius, window))


def f_eps(field, defects, window, params, rtol=1e-9):
    el = elastic_energy(field, defects, window, params, rtol=rtol)
    co = core_energy(defects, window, params)
    return EnergyBreakdown.make(el, co, params.eps)


def elastic_gradient(field, defects, window, params):
    """Exact gradient of the midpoint-rule elastic energy with respect to
    each cell sample; zero for cells outside the window or inside B_{λε}(S)."""
    mask = _grid_in_play(field, defects, window, params)
    g = np.zeros_like(field.values)
    g[mask] = dist2_grad(field.values[mask]) * field.h ** 2
    return g
