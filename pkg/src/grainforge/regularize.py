"""Field regularization on grids: bad-set detection, bounded truncation,
curl mollification near the defect set, and harmonic replacement."""
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import ndimage, sparse
from scipy.signal import fftconvolve
from scipy.sparse.linalg import cg, lsqr

from .circulation import discrete_curl, grad_c
from .energy import cofactor, dist2_so2, f_eps
from .errors import ExtensionImpossibleError, ResolutionError, SolverError
from .fields import DefectSet, GridField

SUP_BOUND = 8 * np.sqrt(2)


def _disc(radius_cells):
    r = int(np.floor(radius_cells + 1e-9))
    i = np.arange(-r, r + 1)
    I, J = np.meshgrid(i, i)
    return (I * I + J * J <= radius_cells ** 2 + 1e-9).astype(float)


def _center_distance(field, defects):
    if defects is None or defects.is_empty:
        return np.full(field.values.shape[:2], np.inf)
    X, Y = field.centers()
    return defects.distance(X, Y)


def _cover_set(field, mask):
    """Closed cells of mask as rectangles."""
    return DefectSet.from_mask(mask, field.domain)


def _ball_cells(dist, r, h):
    """Cells meeting the closed r-neighborhood, judged from center distances."""
    return dist <= r + h / np.sqrt(2)


def _check_resolution(field, params):
    if field.h > params.eps / 4 * (1 + 1e-12):
        raise ResolutionError(f"grid spacing {field.h:.4g} exceeds eps/4 = {params.eps / 4:.4g}")


@dataclass
class BadSetReport:
    E: np.ndarray
    E_prime: np.ndarray
    U: np.ndarray
    measure: float
    elastic: float
    h: float
    maximal: np.ndarray = dfield(repr=False)

    @property
    def constant(self):
        """Measured |E| / elastic energy (0 when both vanish)."""
        if self.measure == 0:
            return 0.0
        return self.measure / self.elastic if self.elastic > 0 else np.inf

    def to_dict(self):
        return {"measure_E": self.measure, "measure_E_prime": float(self.E_prime.sum() * self.h ** 2),
                "cells_E": int(self.E.sum()), "cells_U": int(self.U.sum()),
                "elastic": self.elastic, "constant": self.constant}


def bad_set(field, defects, params):
    """Cells where the discrete maximal function of dist² over radii
    h, 2h, ..., floor(3ε/h) h exceeds 2.

    dist² is taken as zero in B_{λε}(S). E′ is the union of the discrete
    ε-discs contained in E; U is the part of E outside B_{(λ+6)ε}(S), which
    is what truncate rewrites."""
    _check_resolution(field, params)
    h = field.h
    dist = _center_distance(field, defects)
    out_core = dist > params.core_radius
    D = np.where(out_core, dist2_so2(field.values), 0.0)
    ones = np.ones_like(D)
    M = np.zeros_like(D)
    for k in range(1, int(np.floor(3 * params.eps / h + 1e-9)) + 1):
        ker = _disc(k)
        s = fftconvolve(D, ker, mode="same")
        n = fftconvolve(ones, ker, mode="same")
        M = np.maximum(M, s / np.rint(n))
    E = M > 2.0
    E_prime = ndimage.binary_opening(E, structure=_disc(params.eps / h).astype(bool))
    U = E & (dist > (params.lam + 6) * params.eps)
    area = float(E.sum() * h * h)
    elastic = float(D.sum() * h * h)
    return BadSetReport(E, E_prime, U, area, elastic, h, M)


def _grad_matrix(shape, h, support):
    """Sparse map from w (two components on the support cells) to the four
    entries of grad_c w on every cell; support cells must be two cells away
    from the edge so no replicated boundary stencil is involved."""
    ny, nx = shape
    idx = -np.ones(shape, int)
    js, is_ = np.nonzero(support)
    idx[js, is_] = np.arange(js.size)
    n = js.size
    rows, cols, vals = [], [], []
    # entry (c, a, b) of the output: row index ((j*nx + i)*2 + a)*2 + b
    for a in range(2):
        for (dj, di, b) in ((0, 1, 0), (1, 0, 1)):
            # grad_c w_a at cell (j, i) in direction b gets +w(j+dj, i+di)/2h
            # and -w(j-dj, i-di)/2h
            for sgn in (1, -1):
                tj, ti = js - sgn * dj, is_ - sgn * di
                r = ((tj * nx + ti) * 2 + a) * 2 + b
                rows.append(r)
                cols.append(a * n + np.arange(n))
                vals.append(np.full(n, sgn / (2 * h)))
    G = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(ny * nx * 4, 2 * n))
    return G, js, is_


def truncate(field, defects, params, report=None):
    """Bounded replacement on the bad set, curl unchanged.

    Each cell of U gets the target A(z) of its nearest good anchor z (a
    cell outside E and outside B_{λε}(S)), averaged over the 3x3 block for
    a partition of unity. The correction added to the field is grad_c w
    with w supported on U and its one-cell ring, fitted to the targets by
    least squares, so the discrete curl is untouched everywhere.

    Returns (field′, defects′, info) with defects′ covering
    B_{(λ+6)ε}(S) ∪ B_ε(E′) by closed cells."""
    rep = report or bad_set(field, defects, params)
    h, eps = field.h, params.eps
    A = field.values
    ny, nx = A.shape[:2]
    dist = _center_distance(field, defects)
    S_mask = _ball_cells(dist, (params.lam + 6) * eps, h)
    if rep.E_prime.any():
        dE = ndimage.distance_transform_edt(~rep.E_prime) * h
        S_mask |= dE <= eps + h / np.sqrt(2)
    new_defects = _cover_set(field, S_mask)
    info = {"modified_cells": 0, "sup_modified": 0.0, "lsqr_iterations": 0}
    U = rep.U.copy()
    if not U.any():
        return field.copy(), new_defects, info
    good = ~rep.E & (dist > params.core_radius)
    if not good.any():
        raise ExtensionImpossibleError("no good anchor cells at all")
    dgood, (aj, ai) = ndimage.distance_transform_edt(~good, return_indices=True)
    if np.any(dgood[U] * h > 6 * eps):
        raise ExtensionImpossibleError("a bad cell has no good anchor within 6 eps")
    anchor = A[aj, ai]
    T = A.copy()
    tgt = np.where(U[..., None, None], anchor, 0.0)
    cnt = ndimage.uniform_filter(U.astype(float), 3, mode="constant") * 9
    acc = np.stack([ndimage.uniform_filter(tgt[..., a, b], 3, mode="constant") * 9
                    for a in range(2) for b in range(2)], -1).reshape(ny, nx, 2, 2)
    T[U] = acc[U] / np.maximum(cnt[U], 1)[:, None, None]
    inner = np.zeros((ny, nx), bool)
    inner[2:-2, 2:-2] = True
    support = ndimage.binary_dilation(U, np.ones((3, 3), bool)) & inner
    G, _, _ = _grad_matrix((ny, nx), h, support)
    fit = ndimage.binary_dilation(support, np.ones((3, 3), bool))
    rows = np.flatnonzero(np.repeat(fit.ravel(), 4))
    rhs = (T - A).reshape(-1)[rows]
    sol = lsqr(G[rows], rhs, atol=1e-14, btol=1e-14, iter_lim=20000)
    w = sol[0]
    out = A + (G @ w).reshape(ny, nx, 2, 2)
    changed = np.any(out != A, axis=(2, 3))
    info["modified_cells"] = int(changed.sum())
    info["sup_modified"] = float(np.abs(out[changed]).max()) if changed.any() else 0.0
    info["sup_norm_bound"] = SUP_BOUND
    info["lsqr_iterations"] = int(sol[2])
    return GridField(field.domain, out), new_defects, info


def _mollifier(radius_cells):
    r = int(np.floor(radius_cells))
    i = np.arange(-r, r + 1)
    I, J = np.meshgrid(i, i)
    q = (I * I + J * J) / radius_cells ** 2
    k = np.where(q < 1, (1 - q) ** 2, 0.0)
    return k / k.sum()


def mollify_curl(field, defects, params):
    """A″ = (1-ζ)Â + ζ Â⋆φ with Â = A off B_{λε}(S) and I on it.

    ζ is 1 up to distance 1.25λε from S and 0 beyond 1.75λε; φ is a radial
    bump of radius λε. Returns (field″, defects″, info), defects″ the closed
    cells covering B_{2λε}(S)."""
    h, d = field.h, params.core_radius
    if d < 2 * h:
        raise ResolutionError("the core radius must span at least two cells")
    A = field.values
    dist = _center_distance(field, defects)
    core = dist <= d
    Ahat = np.where(core[..., None, None], np.eye(2), A)
    ker = _mollifier(d / h)
    conv = np.empty_like(Ahat)
    for a in range(2):
        for b in range(2):
            conv[..., a, b] = ndimage.convolve(Ahat[..., a, b], ker, mode="nearest")
    zeta = np.clip((1.75 * d - dist) / (0.5 * d), 0.0, 1.0)
    out = (1 - zeta)[..., None, None] * Ahat + zeta[..., None, None] * conv
    S2 = _ball_cells(dist, 2 * d, h)
    new_defects = _cover_set(field, S2) if S2.any() else DefectSet()
    res = GridField(field.domain, out)
    curl = np.linalg.norm(discrete_curl(res), axis=-1)
    sup_hat = float(np.abs(Ahat).max())
    info = {
        "sup_hat": sup_hat,
        "curl_sup_inside": float(curl[S2].max()) if S2.any() else 0.0,
        "curl_sup_outside": float(curl[~S2].max()) if (~S2).any() else 0.0,
        "curl_bound": 10 * sup_hat / d,
        "l2_gap": float(np.sum((out - np.where(core[..., None, None], 0.0, A)) ** 2) * h * h),
    }
    return res, new_defects, info


def _defect_cells(field, defects):
    return _center_distance(field, defects) <= 0


def harmonic_replace(field, defects, params, rtol=1e-12, maxiter=100_000, report=False):
    """field - grad_c z with the wide five-point Laplacian of z equal to the
    central divergence of the field on the free cells and z = 0 elsewhere.

    Free cells are those outside S, not adjacent to a cell of S and at
    least two cells from the domain edge; this keeps grad_c z off S so the
    energy estimate only sees cells outside S. With report=True returns
    (field_harm, info)."""
    A = field.values
    h = field.h
    ny, nx = A.shape[:2]
    inS = _defect_cells(field, defects)
    free = ~ndimage.binary_dilation(inS, np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    edge = np.zeros((ny, nx), bool)
    edge[2:-2, 2:-2] = True
    free &= edge
    div = _div(A, h)
    idx = -np.ones((ny, nx), int)
    js, is_ = np.nonzero(free)
    n = js.size
    idx[js, is_] = np.arange(n)
    z = np.zeros((ny, nx, 2))
    iters = 0
    resid = 0.0
    if n:
        rows = [np.arange(n)]
        cols = [np.arange(n)]
        vals = [np.full(n, 4.0)]
        for dj, di in ((0, 2), (0, -2), (2, 0), (-2, 0)):
            nb = idx[js + dj, is_ + di]
            ok = nb >= 0
            rows.append(np.arange(n)[ok])
            cols.append(nb[ok])
            vals.append(np.full(ok.sum(), -1.0))
        K = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n))
        # -Δ_w z = -div A  with Δ_w = (sum of 2h-neighbors - 4z) / (4h²)
        for a in range(2):
            b = -div[js, is_, a] * 4 * h * h
            if not np.any(b):
                continue
            count = [0]

            def tick(_):
                count[0] += 1

            x, flag = cg(K, b, rtol=rtol, atol=0.0, maxiter=maxiter, callback=tick)
            iters = max(iters, count[0])
            if flag != 0:
                raise SolverError(f"CG did not converge in {maxiter} iterations")
            resid = max(resid, float(np.linalg.norm(K @ x - b) / np.linalg.norm(b)))
            z[js, is_, a] = x
    gz = grad_c(z, h)  # (ny, nx, 2 comps, 2 directions)
    out = GridField(field.domain, A - gz)
    if not report:
        return out
    dres = _div(out.values, h)
    cres = discrete_curl(out)
    el = float(dist2_so2(A)[~inS].sum() * h * h)
    info = {
        "free_cells": int(n), "iterations": int(iters), "relative_residual": resid,
        "div_residual": float(np.abs(dres[free]).max()) if n else 0.0,
        "curl_residual": float(np.abs(cres[free]).max()) if n else 0.0,
        "grad_z_sq": float(np.sum(gz ** 2) * h * h),
        "elastic_outside_S": el,
        "energy_bound": 4 * el,
    }
    return out, info


def _cdiff(a, axis):
    """Central difference (no division by h) with replicated edges."""
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    return 0.5 * (p[tuple(hi)] - p[tuple(lo)])


def _div(A, h):
    """Row-wise central divergence, shape (ny, nx, 2)."""
    return np.stack([(_cdiff(A[..., a, 0], 1) + _cdiff(A[..., a, 1], 0)) / h for a in range(2)], -1)


def cof_gap(m):
    """|M - Cof M|², bounded by 4 dist²(M, SO(2))."""
    a = np.asarray(m, float)
    return np.sum((a - cofactor(a)) ** 2, axis=(-2, -1))


def regularize(field, defects, params, window=None):
    """truncate -> mollify_curl -> harmonic_replace with a per-stage report."""
    window = window or field.domain
    stages = []

    def snap(name, f, S, **extra):
        e = f_eps(f, S, window, params)
        stages.append({"stage": name, "energy": e.to_dict(), "sup_norm": float(np.abs(f.values).max()),
                       "defect_cells": int(_defect_cells(f, S).sum()), **extra})

    snap("input", field, defects)
    rep = bad_set(field, defects, params)
    f1, S1, tinfo = truncate(field, defects, params, report=rep)
    snap("truncate", f1, S1, bad_set=rep.to_dict(), **tinfo)
    f2, S2, minfo = mollify_curl(f1, S1, params)
    snap("mollify_curl", f2, S2, **minfo)
    f3, hinfo = harmonic_replace(f2, S2, params, report=True)
    snap("harmonic_replace", f3, S2, **hinfo)
    base = stages[0]["energy"]["total"]
    for s in stages:
        s["energy_ratio"] = s["energy"]["total"] / base if base > 0 else None
    return f3, S2, {"stages": stages}
