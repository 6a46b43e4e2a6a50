"""Elastic interpolation with lattice-quantized jumps, and the clearing-out
splice that replaces a nearly constant rotation field by the rotation itself.
"""
from dataclasses import dataclass, field as dfield

import numpy as np

from .circulation import discrete_curl
from .energy import dist2_so2
from .errors import BudgetError, InvalidArgument, NoCleanSectionError, PreconditionError
from .fields import AnalyticField, DefectSet, Domain, GridField, as_array
from .quadrature import gauss


def lattice_project(w, tau, eps):
    """Componentwise floor onto τεℤ² (half-open boxes [iτε, (i+1)τε))."""
    b = tau * eps
    return np.floor(np.asarray(w, float) / b) * b


def lattice_index(w, tau, eps):
    return np.floor(np.asarray(w, float) / (tau * eps)).astype(np.int64)


@dataclass
class TraceFunction:
    """Samples of g: [0, L] -> R² on a uniform grid (values shape (n, 2))."""
    values: np.ndarray
    L: float

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(-1, 2)
        if not np.isfinite(self.values).all():
            raise InvalidArgument("trace samples must be finite")
        if not self.L > 0 or len(self.values) < 2:
            raise InvalidArgument("need L > 0 and at least two samples")

    @property
    def t(self):
        return np.linspace(0.0, self.L, len(self.values))

    def __call__(self, t):
        tt = self.t
        return np.stack([np.interp(t, tt, self.values[:, 0]),
                         np.interp(t, tt, self.values[:, 1])], axis=-1)

    def cumulative(self):
        """G at the sample points (trapezoid rule, exact for the linear interpolant)."""
        dt = self.t[1] - self.t[0]
        inc = 0.5 * dt * (self.values[1:] + self.values[:-1])
        return np.vstack([np.zeros((1, 2)), np.cumsum(inc, axis=0)])

    def G(self, t):
        """Exact integral of the piecewise linear interpolant from 0 to t."""
        t = np.clip(np.asarray(t, float), 0.0, self.L)
        tt = self.t
        dt = tt[1] - tt[0]
        k = np.clip(np.floor(t / dt).astype(int), 0, len(tt) - 2)
        s = (t - tt[k])[..., None]
        g0, g1 = self.values[k], self.values[k + 1]
        return self.cumulative()[k] + g0 * s + 0.5 * (g1 - g0) * s * s / dt

    def l2sq(self):
        """∫|g|² by the trapezoid rule on the sample grid."""
        return float(np.trapezoid((self.values ** 2).sum(axis=1), self.t))

    def integral_G2(self, a=0.0, b=None, c=None):
        """∫_a^b |G(t) - c|² dt, exact for the piecewise linear g."""
        b = self.L if b is None else b
        c = np.zeros(2) if c is None else np.asarray(c, float)
        tt = self.t
        pts = np.unique(np.concatenate([[a, b], tt[(tt > a) & (tt < b)]]))
        x, w = gauss(4)
        lo, hi = pts[:-1], pts[1:]
        nodes = 0.5 * (lo + hi)[:, None] + 0.5 * (hi - lo)[:, None] * x
        vals = ((self.G(nodes) - c) ** 2).sum(axis=-1)
        return float((vals * w * 0.5 * (hi - lo)[:, None]).sum())


class InterpolationField(AnalyticField):
    """A e1 = F(x2) - c_i in slab i, A e2 = (1 - x1/ℓ) g(x2), F = -G/ℓ."""

    def __init__(self, g, ell, slabs, offsets):
        self.g, self.ell = g, float(ell)
        self.slabs = np.asarray(slabs, float)
        self.offsets = np.asarray(offsets, float).reshape(-1, 2)

    def slab(self, y):
        return np.clip(np.searchsorted(self.slabs, y, side="right") - 1, 0, len(self.slabs) - 1)

    def evaluate(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        i = self.slab(y)
        out = np.empty(x.shape + (2, 2))
        out[..., :, 0] = -self.g.G(y) / self.ell - self.offsets[i]
        out[..., :, 1] = (1 - x / self.ell)[..., None] * self.g(y)
        return out

    def region(self, x, y):
        return self.slab(np.asarray(y, float)).astype(np.int64)

    def potential(self, x, y, label):
        return ((1 - x / self.ell)[:, None] * self.g.G(y)
                - self.offsets[label] * x[:, None])

    def vbreaks(self, x, ya, yb):
        return np.broadcast_to(self.slabs[1:], (np.size(x), len(self.slabs) - 1))

    def ybreaks(self, ya, yb):
        return np.concatenate([self.slabs, self.g.t])


@dataclass
class InterpolationResult:
    field: AnalyticField
    defects: DefectSet
    M: float
    N: int
    slabs: np.ndarray
    jump_index: list = dfield(default_factory=list)
    jumps: list = dfield(default_factory=list)
    elastic: float = 0.0
    core: float = 0.0
    ell: float = 0.0
    L: float = 0.0

    def bound(self, eps, g_l2):
        return (eps ** (2 / 3) * self.L ** (2 / 3) * (self.ell * g_l2) ** (1 / 3)
                + eps ** 2 * self.L / self.ell)


def build_interpolation(g, ell, L, params):
    """Field on (0, ℓ) x (0, L) with A e2 = (1 - x1/ℓ) g and A e1 piecewise
    equal to -G/ℓ minus a lattice-rounded offset, restarted on slabs of height
    Mℓ. Jumps of A e1 across slab lines are exact multiples of τε/ℓ.

    The offset in slab i is F(s_i) - P(ℓF(s_i))/ℓ, i.e. the projection is
    applied to the accumulated trace, so every jump is a difference of two
    lattice points. elastic is ∫|A|² over the whole rectangle, which bounds
    the integral outside the core region from above."""
    if ell < params.eps:
        raise PreconditionError("need ell >= eps")
    if not isinstance(g, TraceFunction):
        raise InvalidArgument("g must be a TraceFunction")
    if abs(g.L - L) > 1e-12 * L:
        raise InvalidArgument("trace length does not match L")
    g2 = g.l2sq()
    if g2 == 0:
        f = InterpolationField(g, ell, [0.0], np.zeros((1, 2)))
        return InterpolationResult(f, DefectSet(), np.inf, 1, np.array([0.0]), ell=ell, L=L)
    M = (L * params.eps / (ell * g2)) ** (1 / 3)
    N = int(np.floor(L / (M * ell))) + 1
    slabs = np.arange(N) * M * ell
    slabs = slabs[slabs < L]
    N = len(slabs)
    Fs = -g.G(slabs) / ell
    k = lattice_index(ell * Fs, params.tau, params.eps)
    offsets = k * params.burgers / ell
    field = InterpolationField(g, ell, slabs, offsets)
    # A e1 jumps by -(k_i - k_{i-1}) τε/ℓ going up across s_i
    dk = -(k[1:] - k[:-1])
    jumps = [tuple(map(int, v)) for v in dk]
    segs = [((0.0, s), (ell, s)) for s, v in zip(slabs[1:], dk) if np.any(v != 0)]
    S = DefectSet(segments=segs)
    tops = np.append(slabs[1:], L)
    e1 = 0.0
    for s0, s1, c in zip(slabs, tops, offsets):
        # ∫ |F - c|² = (1/ℓ²) ∫ |G + ℓ c|²
        e1 += ell * g.integral_G2(s0, s1, -ell * c) / ell ** 2
    el = e1 + ell / 3 * g2
    core = S.neighborhood_area(params.core_radius, Domain(0.0, ell, 0.0, L)) if len(segs) else 0.0
    return InterpolationResult(field, S, M, N, slabs, jump_index=jumps,
                               jumps=[np.array(v) * params.burgers / ell for v in jumps],
                               elastic=float(el), core=float(core), ell=ell, L=L)


def slab_energy_formula(g, ell):
    """(1/ℓ)∫|∫g|² + (ℓ/3)∫|g|² with the trapezoid rule on g's grid."""
    G = g.cumulative()
    return float(np.trapezoid((G ** 2).sum(axis=1), g.t) / ell + ell / 3 * g.l2sq())


# ---------------------------------------------------------------- clearing out

@dataclass
class ClearOutReport:
    omega: float
    rho: float
    strip: int
    section_col: int
    right_col: int
    bands: list
    added_energy: float
    measured_omega: float

    def to_dict(self):
        return {"omega": self.omega, "rho": self.rho, "strip": self.strip,
                "section_col": self.section_col, "right_col": self.right_col,
                "bands": self.bands, "added_energy": self.added_energy,
                "measured_omega": self.measured_omega}


def _col_range(d, x0, x1):
    i0 = int(np.ceil((x0 - d.x_min) / d.h - 0.5 - 1e-9))
    i1 = int(np.floor((x1 - d.x_min) / d.h - 0.5 + 1e-9))
    return max(i0, 0), min(i1, d.nx - 1)


def _strip_measure(field, in_play, R, params, cols, defects, band):
    """(1/ε)(elastic + core) + Σ|A - R|² over the given column range."""
    d = field.domain
    h = d.h
    sl = (slice(None), slice(cols[0], cols[1] + 1))
    A = field.values[sl]
    keep = in_play[sl]
    el = dist2_so2(A[keep]).sum() * h * h
    dev = ((A[keep] - R) ** 2).sum() * h * h
    x0 = d.x_min + cols[0] * h
    x1 = d.x_min + (cols[1] + 1) * h
    core = 0.0
    if not defects.is_empty:
        core = defects.neighborhood_area(params.core_radius, Domain(x0, x1, band.y_min, band.y_max))
    return (el + core) / params.eps + dev


def clear_out(field, defects, band, R, sigma, params, omega=None):
    """Splice a nearly-R field to exactly R.

    band = (a, b) x (c, d) must coincide with whole grid cells. The strip
    T_i = (a+σ+iρ, a+σ+(i+1)ρ) of least energy is chosen with ρ = ε/√(ε∨ω),
    a clean section column is sought in its left half, and the part of the
    strip right of it is filled with a discrete elastic interpolation whose
    e2 deviation from R falls linearly to zero. Its e1 deviation is fixed by
    zero central discrete curl, and it is reset every slab to the floor
    lattice residue, which puts a lattice-valued circulation on a two-row
    band recorded in the defect set.

    Returns (field, defects, report)."""
    R = as_array(R)
    d = field.domain
    h = d.h
    if not d.contains(band):
        raise InvalidArgument("band is not covered by the field")
    jr = _col_range(Domain(d.y_min, d.y_max, d.x_min, d.x_max, h), band.y_min, band.y_max)
    if jr != (0, d.ny - 1):
        raise InvalidArgument("clear_out expects the band to span the full grid height")
    X, Y = field.centers()
    lam_eps = params.core_radius
    in_play = np.ones(X.shape, bool)
    if not defects.is_empty:
        in_play = defects.distance(X, Y) > lam_eps
    a = band.x_min
    tplus = _col_range(d, a + sigma, a + 2 * sigma)
    measured = _strip_measure(field, in_play, R, params, tplus, defects, band)
    if omega is None:
        omega = measured
    elif measured > omega * (1 + 1e-12):
        raise BudgetError(f"measured omega {measured:.6g} exceeds the budget {omega:.6g}", measured)
    rho = params.eps / np.sqrt(max(params.eps, omega))
    nstrips = int(np.floor(sigma / rho))
    if nstrips < 1:
        raise PreconditionError("sigma is smaller than the strip width")
    strips = [_col_range(d, a + sigma + i * rho, a + sigma + (i + 1) * rho) for i in range(nstrips)]
    if any(c1 - c0 < 4 for c0, c1 in strips):
        raise PreconditionError("grid too coarse: each strip needs at least five columns")
    energies = [_strip_measure(field, in_play, R, params, c, defects, band) for c in strips]
    i0 = int(np.argmin(energies))
    c0, c1 = strips[i0]
    strip_dev = ((field.values[:, c0:c1 + 1] - R) ** 2).sum(axis=(2, 3))
    strip_dev = float((strip_dev * in_play[:, c0:c1 + 1]).sum() * h * h)
    half = _col_range(d, a + sigma + i0 * rho, a + sigma + i0 * rho + rho / 2)
    clean = in_play.all(axis=0)
    sec = None
    for c in range(half[0], half[1] + 1):
        if c + 1 > c1 - 1 or not (clean[c] and clean[c + 1]):
            continue
        trace = ((field.values[:, c + 1] - R) ** 2).sum() * h
        if rho * trace <= 2 * strip_dev + 1e-300:
            sec = c
            break
    if sec is None:
        raise NoCleanSectionError("every candidate section meets the core region or fails the trace bound")

    out = field.values.copy()
    n = c1 - sec
    ny = d.ny
    dev = field.values - R
    phi = np.zeros((ny, n + 2, 2))        # columns sec .. c1+1
    phi[:, 0] = dev[:, sec, :, 1]
    g = dev[:, sec + 1, :, 1]
    for k in range(1, n + 1):
        phi[:, k] = g * (n - k) / (n - 1)
    # slab height from the interpolation bound with ℓ = (n-1)h
    ell = (n - 1) * h
    height = band.y_max - band.y_min
    g2 = float((g ** 2).sum() * h)
    bands = []
    reset_rows = set()
    if g2 > 0:
        M = (height * params.eps / (ell * g2)) ** (1 / 3)
        step = max(int(round(M * ell / h)), 4)
        reset_rows = set(range(step, ny - 3, step))
    psi = np.zeros((ny, n, 2))
    dphi = phi[:, 2:] - phi[:, :-2]           # φ_{k+1} - φ_{k-1} for k = 1..n
    if ny > 1:
        psi[1] = dphi[0]
    j = 1
    while j < ny - 1:
        psi[j + 1] = psi[j - 1] + dphi[j]
        js = j + 1
        if js in reset_rows and js + 1 < ny:
            nxt = psi[js - 1] + dphi[js]
            T = 0.5 * h * (psi[js] + nxt).sum(axis=0)
            P = lattice_project(T, params.tau, params.eps)
            if np.any(P != 0):
                m = (T - P) / (n * h)
                psi[js] = m
                psi[js + 1] = m
                bands.append({"rows": [js - 1, js],
                              "lattice": lattice_index(P, params.tau, params.eps).tolist()})
            else:
                psi[js + 1] = nxt
            j = js + 1
        else:
            j += 1
    cs = slice(sec + 1, c1 + 1)
    out[:, cs, :, 1] = R[:, 1] + phi[:, 1:n + 1]
    out[:, cs, :, 0] = R[:, 0] + psi
    out[:, c1 + 1:] = R
    new = GridField(d, out)

    # defects: keep what lies left of the section, add reset bands and the
    # top row of the transition (replicated-edge curl there is an artifact)
    xs = d.x_min + (sec + 1) * h
    keep = DefectSet()
    if not defects.is_empty:
        b = defects.boxes
        idx = [i for i in range(len(b)) if b[i, 1] < xs]
        keep = defects.subset(idx)
    x_lo, x_hi = d.x_min + (sec + 1) * h, d.x_min + (c1 + 1) * h
    rects = []
    for bd in bands:
        r0, r1 = bd["rows"]
        rects.append((x_lo, x_hi, d.y_min + r0 * h, d.y_min + (r1 + 1) * h))
    curl = np.linalg.norm(discrete_curl(new)[:, sec - 1:c1 + 3], axis=-1)
    tol = 1e-9 * max(1.0, np.abs(out).max()) / h
    band_rows = set()
    for bd in bands:
        band_rows.update(range(bd["rows"][0], bd["rows"][1] + 1))
    stray = [j for j in np.flatnonzero((curl > tol).any(axis=1)) if j not in band_rows]
    for j in stray:
        rects.append((x_lo, x_hi, d.y_min + j * h, d.y_min + (j + 1) * h))
    S_new = keep | DefectSet(rectangles=rects)

    X0 = d.x_min + (sec + 1) * h
    trans = Domain(X0, d.x_max, band.y_min, band.y_max)
    in_new = np.ones(X.shape, bool)
    if not S_new.is_empty:
        in_new = S_new.distance(X, Y) > lam_eps
    sel = in_new & (X > X0)
    el = dist2_so2(out[sel]).sum() * h * h
    core = S_new.neighborhood_area(lam_eps, trans) if not S_new.is_empty else 0.0
    added = (el + core) / params.eps
    rep = ClearOutReport(float(omega), float(rho), i0, int(sec), int(c1), bands, float(added), float(measured))
    return new, S_new, rep
