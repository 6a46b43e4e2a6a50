"""Cell problem on Q_L at unit scale (ε = τ = 1), its thermodynamic trend,
the interfacial density Φ, and the Read-Shockley sweep."""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import ndimage

from .circulation import check_h2, discrete_curl
from .constructions import (SIN_ALPHA_MAX, THETA_MIN, build_r_to_r, construction_energy_per_length,
                            derive_rr_params)
from .energy import dist2_grad, dist2_so2
from .errors import (AlphaTooLargeError, InvalidArgument, OptimizerFault, ThetaDegenerateError,
                     UsageError)
from .fields import (DefectSet, Domain, GridField, ModelParams, Rotation2, SharpInterfaceField,
                     rasterize, rot)


@dataclass(frozen=True)
class CellConfig:
    h: float = 0.25
    lam: float = 1.0
    max_iter: int = 4000
    rtol: float = 1e-6
    window: int = 50
    greedy_every: int = 10
    collar: float = 1.0
    init: str = "auto"      # auto | sharp | construction
    curl_tol: float = 1e-9

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PsiEstimate:
    L: float
    value: float
    elastic: float
    core: float
    iterations: int
    init: str
    init_value: float
    upper: bool = True
    history: list = dfield(default_factory=list, repr=False)
    field: GridField = dfield(default=None, repr=False)
    mask: np.ndarray = dfield(default=None, repr=False)

    @property
    def defects(self):
        return DefectSet.from_mask(self.mask, self.field.domain)

    def to_dict(self):
        return {"L": self.L, "value": self.value, "elastic": self.elastic, "core": self.core,
                "iterations": self.iterations, "init": self.init, "init_value": self.init_value,
                "upper_estimate": self.upper}


def _angle(r):
    if isinstance(r, Rotation2):
        return r.theta
    a = np.asarray(r, float)
    if a.ndim == 0:
        return float(a)
    return float(np.arctan2(a[1, 0], a[0, 0]))


def _disc(radius_cells):
    r = int(np.floor(radius_cells + 1e-9))
    i = np.arange(-r, r + 1)
    I, J = np.meshgrid(i, i)
    return I * I + J * J <= radius_cells ** 2 + 1e-9


# ---------------------------------------------------------------- state and energy

class _Problem:
    """Grid field A = A0 + grad_c w on Q_L, w on the free cells only, and a
    defect cell mask whose λ-dilation is the core."""

    def __init__(self, A0, mask, L, cfg):
        self.A0 = A0
        self.L = L
        self.cfg = cfg
        self.h = A0.h
        n = A0.values.shape[0]
        self.disc = _disc(cfg.lam / self.h)
        X, Y = A0.centers()
        inner = L - cfg.collar - 2 * self.h
        self.free = (np.abs(X) < inner) & (np.abs(Y) < inner)
        self.w = np.zeros((n, n, 2))
        curl = np.linalg.norm(discrete_curl(A0), axis=-1)
        self.pinned = curl > cfg.curl_tol
        self.mask = mask | self.pinned
        self._cover()

    def _cover(self):
        self.count = np.rint(ndimage.convolve(self.mask.astype(float), self.disc.astype(float),
                                              mode="constant")).astype(int)

    def field(self, w=None):
        w = self.w if w is None else w
        return self.A0.values + _grad(w, self.h)

    def energy(self, A=None):
        A = self.field() if A is None else A
        open_ = self.count == 0
        h2 = self.h ** 2
        el = float(dist2_so2(A[open_]).sum() * h2)
        co = float((~open_).sum() * h2)
        return el, co

    def gradient(self, A):
        G = dist2_grad(A) * (self.count == 0)[..., None, None]
        g = _grad_adjoint(G, self.h) * self.h ** 2
        return g * self.free[..., None]

    def greedy(self, A):
        """Add cells whose dilation saves more elastic energy than it costs,
        then drop curl-free cells whose exclusive cover costs more than the
        elastic energy it hides. Returns the number of changes."""
        D = dist2_so2(A)
        k = self.disc.astype(float)
        gain_add = ndimage.correlate((D - 1.0) * (self.count == 0), k, mode="constant")
        cand = (~self.mask) & (gain_add > 1e-12)
        changes = self._apply(cand, gain_add, add=True)
        gain_rm = ndimage.correlate((1.0 - D) * (self.count == 1), k, mode="constant")
        cand = self.mask & ~self.pinned & (gain_rm > 1e-12)
        changes += self._apply(cand, gain_rm, add=False)
        return changes

    def _apply(self, cand, gain, add):
        idx = np.argwhere(cand)
        if not len(idx):
            return 0
        order = np.argsort(-gain[cand], kind="stable")
        r = self.disc.shape[0]
        taken = np.zeros_like(cand)
        blocked = np.zeros_like(cand)
        for j, i in idx[order]:
            if blocked[j, i]:
                continue
            taken[j, i] = True
            blocked[max(j - r, 0):j + r + 1, max(i - r, 0):i + r + 1] = True
        if add:
            self.mask |= taken
        else:
            self.mask &= ~taken
        self._cover()
        return int(taken.sum())


def _grad(w, h):
    """Central gradient of w (n, n, 2) with zero padding: (n, n, 2, 2)."""
    p = np.pad(w, ((1, 1), (1, 1), (0, 0)))
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * h)
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * h)
    return np.stack([gx, gy], axis=-1)


def _grad_adjoint(G, h):
    p = np.pad(G, ((1, 1), (1, 1), (0, 0), (0, 0)))
    ax = (p[1:-1, :-2, :, 0] - p[1:-1, 2:, :, 0]) / (2 * h)
    ay = (p[:-2, 1:-1, :, 1] - p[2:, 1:-1, :, 1]) / (2 * h)
    return ax + ay


def _descend(prob, max_iter, rtol, window, greedy_every):
    A = prob.field()
    el, co = prob.energy(A)
    F = el + co
    hist = [F]
    step = 1e-2
    rises = 0
    it = 0
    for it in range(1, max_iter + 1):
        g = prob.gradient(A)
        gg = float(np.sum(g * g))
        moved = False
        if gg > 0:
            t = step
            while t > 1e-14:
                w_new = prob.w - t * g
                A_new = prob.field(w_new)
                el_n, co_n = prob.energy(A_new)
                if el_n + co_n <= F - 1e-4 * t * gg:
                    prob.w, A = w_new, A_new
                    moved = True
                    step = 2 * t
                    break
                t *= 0.5
        if greedy_every and it % greedy_every == 0:
            moved |= prob.greedy(A) > 0
        el_n, co_n = prob.energy(A)
        Fn = el_n + co_n
        rises = rises + 1 if Fn > F + 1e-12 * max(abs(F), 1.0) else 0
        if rises >= 3:
            raise OptimizerFault("objective rose on three consecutive accepted steps")
        F = Fn
        hist.append(F)
        if not moved and (not greedy_every or it % greedy_every == 0):
            break
        if len(hist) > window and hist[-window - 1] - F <= rtol * abs(hist[-window - 1]):
            break
    return it, hist


# ---------------------------------------------------------------- initializers

def _box(L, h):
    return Domain(-L, L, -L, L, h)


def sharp_init(am, ap, L, cfg):
    d = _box(L, cfg.h)
    f = rasterize(SharpInterfaceField(rot(am), rot(ap)), d)
    return f, np.zeros((d.ny, d.nx), bool)


def construction_init(am, ap, L, cfg):
    """Composite wall rasterized (mid-line averages) on Q_L, cut to the sharp
    interface above and below |y| = L - collar. Returns None when the wall
    does not fit or its parameters are not available."""
    theta, alpha = 0.5 * (am + ap), 0.5 * (ap - am)
    try:
        p = derive_rr_params(theta, alpha, 1.0, 1.0)
    except (ThetaDegenerateError, AlphaTooLargeError, InvalidArgument):
        return None
    if p.trivial or p.half_width > L - cfg.collar - 2 * cfg.h:
        return None
    d = _box(L, cfg.h)
    cut = L - cfg.collar
    wall, S = build_r_to_r(p, y_range=(-L - 2 * p.h_B, L + 2 * p.h_B))
    g = rasterize(wall, d, mode="segment").values
    s = rasterize(SharpInterfaceField(rot(am), rot(ap)), d).values
    X, Y = d.centers()
    Yc = np.meshgrid(X, Y)[1]
    vals = np.where((np.abs(Yc) < cut)[..., None, None], g, s)
    f = GridField(d, vals)
    Xc = np.meshgrid(X, Y)[0]
    mask = S.distance(Xc, Yc) <= cfg.h
    return f, mask


def _run(A0, mask, L, cfg, tag):
    prob = _Problem(A0, mask, L, cfg)
    el0, co0 = prob.energy()
    it, hist = _descend(prob, cfg.max_iter, cfg.rtol, cfg.window, cfg.greedy_every)
    el, co = prob.energy()
    return PsiEstimate(L=float(L), value=(el + co) / (2 * L), elastic=el, core=co, iterations=it,
                       init=tag, init_value=(el0 + co0) / (2 * L), history=hist,
                       field=GridField(A0.domain, prob.field()), mask=prob.mask.copy())


def psi_estimate(Rm, Rp, L, config=None, init_field=None):
    """Upper estimate of ψ(R⁻, R⁺, L) / (2L) at unit scale.

    Starts from the sharp interface and, when it fits in the box, from the
    composite wall, keeping the lower initial energy. The field moves by
    central gradients of a potential supported away from the clamped
    collar, so the discrete curl and every Burgers vector stay fixed; the
    defect mask follows a greedy add/drop rule."""
    cfg = config or CellConfig()
    if L < 4:
        raise InvalidArgument("L must be at least 4")
    if cfg.h > 0.25 + 1e-12:
        raise InvalidArgument("grid spacing must be at most 1/4")
    if abs(round(L / cfg.h) - L / cfg.h) > 1e-9:
        raise InvalidArgument("L must be a multiple of the grid spacing")
    am, ap = _angle(Rm), _angle(Rp)
    if init_field is not None:
        A0, mask = init_field
        return _run(A0, mask, L, cfg, "tiled")
    if np.isclose(np.cos(am - ap), 1.0, rtol=0, atol=1e-15) and np.isclose(np.sin(am - ap), 0.0, atol=1e-15):
        d = _box(L, cfg.h)
        A0 = GridField(d, np.broadcast_to(rot(am), (d.ny, d.nx, 2, 2)).copy())
        return _run(A0, np.zeros((d.ny, d.nx), bool), L, cfg, "constant")
    cands = []
    if cfg.init in ("auto", "sharp"):
        cands.append(("sharp",) + sharp_init(am, ap, L, cfg))
    if cfg.init in ("auto", "construction"):
        c = construction_init(am, ap, L, cfg)
        if c is not None:
            cands.append(("construction",) + c)
        elif cfg.init == "construction":
            raise UsageError("the composite wall does not fit in Q_L for these rotations")
    best = None
    for tag, A0, mask in cands:
        e = sum(_Problem(A0, mask, L, cfg).energy())
        if best is None or e < best[0]:
            best = (e, tag, A0, mask)
    return _run(best[2], best[3], L, cfg, best[1])


def tile_init(est, M, am, ap):
    """Vertical tiling of a Q_L minimizer into Q_M (M = kL), padded with the
    sharp-interface values left and right."""
    L = est.L
    k = int(round(M / L))
    if abs(k * L - M) > 1e-9 or k < 1:
        raise InvalidArgument("M must be an integer multiple of L")
    h = est.field.h
    d = _box(M, h)
    base = rasterize(SharpInterfaceField(rot(am), rot(ap)), d).values
    mask = np.zeros((d.ny, d.nx), bool)
    n = est.field.values.shape[0]
    i0 = (d.nx - n) // 2
    col = np.concatenate([est.field.values] * k, axis=0)
    mcol = np.concatenate([est.mask] * k, axis=0)
    base[:, i0:i0 + n] = col
    mask[:, i0:i0 + n] = mcol
    return GridField(d, base), mask


def psi_infty(Rm, Rp, L_list, config=None, C=5.0):
    """Run the cell problem along L_list, seeding each box with the vertical
    tiling of the previous minimizer when the sizes are commensurate.

    Returns (last value, report)."""
    L_list = [float(x) for x in L_list]
    if len(L_list) < 3 or any(b <= a for a, b in zip(L_list, L_list[1:])):
        raise InvalidArgument("L_list needs at least three increasing entries")
    cfg = config or CellConfig()
    am, ap = _angle(Rm), _angle(Rp)
    runs = []
    prev = None
    for L in L_list:
        init = None
        if prev is not None and abs(L / prev.L - round(L / prev.L)) < 1e-9:
            init = tile_init(prev, L, am, ap)
        est = psi_estimate(Rm, Rp, L, cfg, init_field=init)
        runs.append(est)
        prev = est
    vals = [r.value for r in runs]
    gaps = [abs(b - a) for a, b in zip(vals, vals[1:])]
    tiling = [{"L": a.L, "M": b.L, "lhs": b.value, "rhs": a.value + C / a.L,
               "init_lhs": b.init_value, "ok": b.value <= a.value + C / a.L}
              for a, b in zip(runs, runs[1:])]
    report = {
        "runs": [r.to_dict() for r in runs],
        "values": vals,
        "gaps": gaps,
        "gaps_nonincreasing": all(g2 <= g1 + 1e-12 for g1, g2 in zip(gaps, gaps[1:])),
        "tiling": tiling,
        "tiling_ok": all(t["ok"] for t in tiling),
        "diverging": len(gaps) > 1 and gaps[-1] > gaps[-2] + 1e-12,
    }
    return vals[-1], report


def strip_fraction(est, deltas=(0.25, 0.125, 0.0625)):
    """Share of the energy of a cell-problem run located outside the strip
    |x| <= δ L, for each δ."""
    A = est.field.values
    h = est.field.h
    X, _ = est.field.centers()
    prob_count = np.rint(ndimage.convolve(est.mask.astype(float),
                                          _disc(1.0 / h).astype(float), mode="constant"))
    dens = np.where(prob_count == 0, dist2_so2(A), 1.0)
    total = dens.sum()
    out = {}
    for dl in deltas:
        far = np.abs(X) > dl * est.L
        out[float(dl)] = float(dens[far].sum() / total) if total > 0 else 0.0
    return out


def psi0_consistency(runs, deltas=(0.25, 0.125, 0.0625)):
    """Outside-strip energy fractions along a list of runs of increasing L."""
    rows = [{"L": r.L, "fractions": strip_fraction(r, deltas)} for r in runs]
    trend = {}
    for dl in deltas:
        f = [row["fractions"][float(dl)] for row in rows]
        trend[float(dl)] = all(b <= a + 1e-12 for a, b in zip(f, f[1:]))
    return {"rows": rows, "nonincreasing": trend}


# ---------------------------------------------------------------- Φ

def canonical_angles(Rm, Rp, n):
    """(θ, α) of the frame-rotated pair with α >= 0 and θ folded into
    [0, π/2); n is a unit vector or an angle."""
    if np.ndim(n) == 0:
        phin = float(n)
    else:
        v = np.asarray(n, float)
        if not np.isclose(np.hypot(*v), 1.0, atol=1e-9):
            raise InvalidArgument("n must be a unit vector")
        phin = float(np.arctan2(v[1], v[0]))
    am, ap = _angle(Rm) + phin, _angle(Rp) + phin
    alpha = 0.5 * float(np.angle(np.exp(1j * (ap - am))))
    theta = am + alpha
    # swapping the grains and flipping n moves θ by π and flips α
    if alpha < 0:
        alpha = -alpha
    theta = float(np.mod(theta, np.pi / 2))
    return round(theta, 12) % (np.pi / 2), round(float(alpha), 12)


_PHI_MEMO = {}


def phi(Rm, Rp, n=(1.0, 0.0), source="construction", config=None, L_list=(16, 32, 64)):
    """Interfacial density for the pair (R⁻, R⁺) across normal n.

    source="construction" returns the energy per length of the explicit
    competitor (composite wall, or 2λ for sin α >= 1/8 and near-axis θ);
    source="optimize" returns the ψ∞ estimate of the cell problem. Values
    are memoized on the folded (θ, α)."""
    theta, alpha = canonical_angles(Rm, Rp, n)
    cfg = config or CellConfig()
    key = (source, theta, alpha, cfg, tuple(L_list))
    if key in _PHI_MEMO:
        return _PHI_MEMO[key]
    lam = cfg.lam
    if alpha == 0:
        val = 0.0
    elif source == "construction":
        if not (THETA_MIN < theta < np.pi / 2 - THETA_MIN) or np.sin(alpha) >= SIN_ALPHA_MAX:
            val = 2.0 * lam
        else:
            val, _ = construction_energy_per_length(theta, alpha, ModelParams(1.0, 1.0, lam))
    elif source == "optimize":
        val, _ = psi_infty(theta - alpha, theta + alpha, L_list, cfg)
    else:
        raise InvalidArgument(f"unknown phi source {source!r}")
    _PHI_MEMO.setdefault(key, float(val))
    return _PHI_MEMO[key]


# ---------------------------------------------------------------- Read-Shockley

@dataclass
class RSCurve:
    theta: float
    alphas: list
    values: list
    ratios: list
    sharp: float
    slope: float = None
    r2: float = None
    r2_centered: float = None
    psi: list = None

    def rows(self):
        out = []
        for i, a in enumerate(self.alphas):
            out.append({"alpha": a, "theta": self.theta, "value": self.values[i],
                        "bound_ratio": self.ratios[i]})
        return out

    def fit_dict(self):
        return {"theta": self.theta, "slope": self.slope, "r2": self.r2,
                "r2_centered": self.r2_centered, "sharp_value": self.sharp,
                "points": len(self.alphas),
                "fit_ratios": (None if self.slope is None else
                               [v / (self.slope * _rs_form(a)) for a, v in zip(self.alphas, self.values)])}


def _rs_form(alpha):
    s = np.sin(alpha)
    return s * (abs(np.log(s)) + 1)


def fit_through_origin(x, y):
    """Least-squares c in y ≈ c x; returns (c, uncentered R², centered R²)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    c = float(x @ y / (x @ x))
    res = float(np.sum((y - c * x) ** 2))
    r2 = 1 - res / float(y @ y)
    r2c = 1 - res / float(np.sum((y - y.mean()) ** 2)) if len(y) > 1 else float("nan")
    return c, r2, r2c


def _rs_point(args):
    theta, alpha, eps, lam, rtol = args
    val, _ = construction_energy_per_length(theta, alpha, ModelParams(eps, 1.0, lam), rtol=rtol,
                                            strict=False)
    return float(val)


def jobs_default():
    try:
        return max(1, int(os.environ.get("GRAINFORGE_JOBS", "1")))
    except ValueError:
        raise UsageError("GRAINFORGE_JOBS must be an integer")


def read_shockley_sweep(theta, alpha_list, eps=1e-3, L_rule=None, config=None, lam=1.0,
                        rtol=1e-8, jobs=None):
    """Construction energy per unit length along alpha_list and its
    through-origin fit against sin α (|log sin α| + 1).

    The composite wall is evaluated wherever it can be built, including
    sin α >= 1/8; the sharp value 2λ is reported next to the fit. When
    L_rule is given (a callable α -> L, or a number), the cell problem is
    also run at that L for each α."""
    alphas = [float(a) for a in alpha_list]
    if not alphas:
        raise UsageError("alpha list is empty")
    if any(b <= a for a, b in zip(alphas, alphas[1:])) or alphas[0] <= 0:
        raise InvalidArgument("alphas must be positive and strictly increasing")
    jobs = jobs or jobs_default()
    args = [(float(theta), a, float(eps), float(lam), rtol) for a in alphas]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            values = list(ex.map(_rs_point, args))
        values = [float(v) for v in values]
    else:
        values = [_rs_point(a) for a in args]
    ratios = [v / _rs_form(a) for a, v in zip(alphas, values)]
    curve = RSCurve(float(theta), alphas, values, ratios, 2.0 * lam)
    if len(alphas) > 1:
        curve.slope, curve.r2, curve.r2_centered = fit_through_origin(
            [_rs_form(a) for a in alphas], values)
    if L_rule is not None:
        cfg = config or CellConfig(lam=lam)
        rule = L_rule if callable(L_rule) else (lambda a: L_rule)
        curve.psi = [psi_estimate(theta - a, theta + a, rule(a), cfg).value for a in alphas]
    return curve


def check_run_h2(est, tol=None):
    """Burgers check of a cell-problem output (unit scale); components that
    reach the box edge are listed as skipped."""
    return check_h2(est.field, est.defects, ModelParams(1.0, 1.0, 1.0), tol=tol,
                    skip_boundary=True)
