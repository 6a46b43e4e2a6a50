"""Explicit interface fields built from vertical walls of dislocations.

Three cell types, each living on Q = [-l, l] x [-h, h] and repeated with
vertical period 2h:

* compression to compression: D_{η,μ} on the left, D_{η̃,μ̃} on the right;
* rotation to compression: R_β on the left, D_{η,μ} on the right;
* rotation to rotation: two rotation-to-compression walls glued to a
  compression-to-compression wall, all left-multiplied by R_θ.

Region layout of the compression-to-compression cell (labels in brackets):
Q' = [-r, r] x [-ρ, ρ] is the identity [0]; the cones |x1| <= (l/h)|x2|
above [3] and below [4] carry the rational matrices; the rest of the cell
is D_{η,μ} for x1 < 0 [1] and D_{η̃,μ̃} for x1 > 0 [2]; outside |x1| > l the
exterior values continue [5, 6].

Rotation to compression: Q' [0]; the left cone {x1 < 0, |x2| <= (h/l)|x1|}
[1]; everything else in the cell is D_{η,μ} [2]; exterior R_β [3] and
D_{η,μ} [4].
"""
from dataclasses import dataclass, asdict

import numpy as np

from .errors import AlphaTooLargeError, InvalidArgument, ThetaDegenerateError, TilingIncompatibleError
from .fields import (AnalyticField, ConstantField, DefectSet, Domain, GluedField, GridField,
                     LeftMultipliedField, PeriodicField, PointReflectedField, SharpInterfaceField,
                     TranslatedField, rot, shear)

THETA_MIN = 0.05
SIN_ALPHA_MAX = 1.0 / 8.0


@dataclass(frozen=True)
class CtoCParams:
    eta: float
    eta_t: float
    mu: float
    mu_t: float
    l: float
    h: float
    r: float
    rho: float

    def __post_init__(self):
        if not (self.l > 0 and self.h > 0 and self.r > 0 and self.rho > 0):
            raise InvalidArgument("cell sizes must be positive")
        if not (self.r < min(self.h, self.l) and self.rho < min(self.h, self.l)):
            raise InvalidArgument("need r, rho < min(h, l)")


@dataclass(frozen=True)
class RtoCParams:
    beta: float
    eta: float
    mu: float
    l: float
    h: float
    r: float
    rho: float

    def __post_init__(self):
        if self.eta == 0:
            raise InvalidArgument("eta must be nonzero")
        if not (self.l > 0 and self.h > 0 and self.r > 0 and self.rho > 0):
            raise InvalidArgument("cell sizes must be positive")
        if not (self.r < min(self.h, self.l) and self.rho < min(self.h, self.l)):
            raise InvalidArgument("need r, rho < min(h, l)")

    @property
    def xi(self):
        c, s = np.cos(self.beta), np.sin(self.beta)
        h = self.h
        return (-2 * h * self.mu / self.eta * c - 2 * h * s, 2 * h / self.eta * c - 2 * h)


class CtoCCell(AnalyticField):
    def __init__(self, p):
        self.p = p
        self.D = shear(p.eta, p.mu)
        self.Dt = shear(p.eta_t, p.mu_t)
        self.dmu = p.mu_t - p.mu
        self.deta = p.eta_t - p.eta
        self.mubar = 0.5 * (p.mu + p.mu_t)
        self.etabar = 0.5 * (p.eta + p.eta_t)

    def region(self, x, y):
        p = self.p
        lab = np.where(x < 0, 1, 2)
        cone = np.abs(x) * p.h <= p.l * np.abs(y)
        lab = np.where(cone, np.where(y > 0, 3, 4), lab)
        lab = np.where(x < -p.l, 5, lab)
        lab = np.where(x > p.l, 6, lab)
        lab = np.where((np.abs(x) <= p.r) & (np.abs(y) <= p.rho), 0, lab)
        return lab.astype(np.int64)

    def cone_matrix(self, x, y, upper):
        p = self.p
        k = p.h / (2 * p.l)
        sg = 1.0 if upper else -1.0
        q = p.h ** 2 / (2 * p.l * y)
        r = p.h ** 2 * x / (2 * p.l * y ** 2)
        out = np.empty(np.shape(x) + (2, 2))
        out[..., 0, 0] = 1 + sg * k * self.dmu - q * self.dmu
        out[..., 0, 1] = self.mubar + r * self.dmu
        out[..., 1, 0] = sg * k * self.deta - q * self.deta
        out[..., 1, 1] = self.etabar + r * self.deta
        return out

    def evaluate(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        lab = self.region(x, y)
        out = np.empty((x.size, 2, 2))
        out[lab == 0] = np.eye(2)
        out[(lab == 1) | (lab == 5)] = self.D
        out[(lab == 2) | (lab == 6)] = self.Dt
        for c, up in ((3, True), (4, False)):
            m = lab == c
            if m.any():
                with np.errstate(divide="ignore", invalid="ignore"):
                    out[m] = self.cone_matrix(x[m], y[m], up)
        return out

    def potential(self, x, y, label):
        p = self.p
        out = np.empty((np.size(x), 2))
        xy = np.stack([x, y], axis=-1)
        m = label == 0
        out[m] = xy[m]
        m = (label == 1) | (label == 5)
        out[m] = xy[m] @ self.D.T
        m = (label == 2) | (label == 6)
        out[m] = xy[m] @ self.Dt.T
        k = p.h / (2 * p.l)
        c = p.h ** 2 / (2 * p.l)
        for lab, sg in ((3, 1.0), (4, -1.0)):
            m = label == lab
            if m.any():
                xx, yy = x[m], y[m]
                with np.errstate(divide="ignore", invalid="ignore"):
                    out[m, 0] = (xx + sg * k * xx * self.dmu - c * xx / yy * self.dmu
                                 + self.mubar * (yy - sg * p.h))
                    out[m, 1] = (sg * k * xx * self.deta - c * xx / yy * self.deta
                                 + self.etabar * (yy - sg * p.h) + sg * p.h)
        return out

    def hbreaks(self, y, xa, xb):
        p = self.p
        y = np.asarray(y, float)
        n = y.size
        inq = np.abs(y) <= p.rho
        cone = np.where(np.abs(y) <= p.h, p.l / p.h * np.abs(y), np.nan)
        cols = [np.full(n, -p.l), np.full(n, p.l),
                np.where(inq, -p.r, np.nan), np.where(inq, p.r, np.nan), -cone, cone]
        return np.stack(cols, axis=1)

    def vbreaks(self, x, ya, yb):
        p = self.p
        x = np.asarray(x, float)
        n = x.size
        inq = np.abs(x) <= p.r
        cone = np.where(np.abs(x) <= p.l, p.h / p.l * np.abs(x), np.nan)
        cols = [np.where(inq, -p.rho, np.nan), np.where(inq, p.rho, np.nan), -cone, cone,
                np.zeros(n)]
        return np.stack(cols, axis=1)

    def ybreaks(self, ya, yb):
        p = self.p
        c = p.h / p.l * p.r
        return np.array([-p.h, -c, -p.rho, 0.0, p.rho, c, p.h])

    def describe(self):
        return {"type": "c_to_c_cell", "params": asdict(self.p)}


class RtoCCell(AnalyticField):
    def __init__(self, p):
        self.p = p
        self.D = shear(p.eta, p.mu)
        self.Rb = rot(p.beta)
        self.s = p.mu + np.sin(p.beta)
        self.c = p.eta - np.cos(p.beta)

    def region(self, x, y):
        p = self.p
        lab = np.full(np.shape(x), 2)
        cone = (x < 0) & (np.abs(y) * p.l <= p.h * np.abs(x))
        lab = np.where(cone, 1, lab)
        lab = np.where(x < -p.l, 3, lab)
        lab = np.where(x > p.l, 4, lab)
        lab = np.where((np.abs(x) <= p.r) & (np.abs(y) <= p.rho), 0, lab)
        return lab.astype(np.int64)

    def cone_matrix(self, x, y):
        l = self.p.l
        out = np.empty(np.shape(x) + (2, 2))
        out[..., 0, 0] = 1 - l * y / x ** 2 * self.s
        out[..., 0, 1] = self.p.mu + l / x * self.s
        out[..., 1, 0] = -l * y / x ** 2 * self.c
        out[..., 1, 1] = self.p.eta + l / x * self.c
        return out

    def evaluate(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        lab = self.region(x, y)
        out = np.empty((x.size, 2, 2))
        out[lab == 0] = np.eye(2)
        out[(lab == 2) | (lab == 4)] = self.D
        out[lab == 3] = self.Rb
        m = lab == 1
        if m.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                out[m] = self.cone_matrix(x[m], y[m])
        return out

    def potential(self, x, y, label):
        p = self.p
        out = np.empty((np.size(x), 2))
        xy = np.stack([x, y], axis=-1)
        m = label == 0
        out[m] = xy[m]
        m = (label == 2) | (label == 4)
        out[m] = xy[m] @ self.D.T
        m = label == 3
        out[m] = xy[m] @ self.Rb.T
        m = label == 1
        if m.any():
            xx, yy = x[m], y[m]
            with np.errstate(divide="ignore", invalid="ignore"):
                out[m, 0] = (p.mu + p.l / xx * self.s) * yy + xx - p.h * self.s
                out[m, 1] = (p.eta + p.l / xx * self.c) * yy - p.h * self.c
        return out

    def hbreaks(self, y, xa, xb):
        p = self.p
        y = np.asarray(y, float)
        n = y.size
        inq = np.abs(y) <= p.rho
        cone = np.where(np.abs(y) <= p.h, -p.l / p.h * np.abs(y), np.nan)
        cols = [np.full(n, -p.l), np.full(n, p.l),
                np.where(inq, -p.r, np.nan), np.where(inq, p.r, np.nan), cone]
        return np.stack(cols, axis=1)

    def vbreaks(self, x, ya, yb):
        p = self.p
        x = np.asarray(x, float)
        inq = np.abs(x) <= p.r
        cone = np.where((x < 0) & (x >= -p.l), p.h / p.l * np.abs(x), np.nan)
        cols = [np.where(inq, -p.rho, np.nan), np.where(inq, p.rho, np.nan), -cone, cone]
        return np.stack(cols, axis=1)

    def ybreaks(self, ya, yb):
        p = self.p
        c = p.h / p.l * p.r
        return np.array([-p.h, -c, -p.rho, 0.0, p.rho, c, p.h])

    def describe(self):
        return {"type": "r_to_c_cell", "params": asdict(self.p)}


def _column_rects(cx, r, h, rho, y_range):
    """Rectangles [cx-r, cx+r] x [2kh-rho, 2kh+rho] meeting y_range."""
    y0, y1 = y_range
    k0 = int(np.floor((y0 - rho) / (2 * h))) - 1
    k1 = int(np.ceil((y1 + rho) / (2 * h))) + 1
    out = []
    for k in range(k0, k1 + 1):
        c = 2 * k * h
        if c + rho >= y0 and c - rho <= y1:
            out.append((cx - r, cx + r, c - rho, c + rho))
    return out


def _default_range(h):
    return (-3 * h, 3 * h)


def build_c_to_c(p, y_range=None):
    """Periodic compression-to-compression wall; returns (field, defects)."""
    field = PeriodicField(CtoCCell(p), p.h)
    rects = _column_rects(0.0, p.r, p.h, p.rho, y_range or _default_range(p.h))
    return field, DefectSet(rectangles=rects)


def build_r_to_c(p, y_range=None):
    """Periodic rotation-to-compression wall; returns (field, defects)."""
    field = PeriodicField(RtoCCell(p), p.h)
    rects = _column_rects(0.0, p.r, p.h, p.rho, y_range or _default_range(p.h))
    return field, DefectSet(rectangles=rects)


@dataclass(frozen=True)
class RRParams:
    theta: float
    alpha: float
    eps: float
    tau: float
    eta: float
    eta_t: float
    mu: float
    mu_t: float
    h_D: float
    l_D: float
    rho_D: float
    r_D: float
    h_B: float
    l_B: float
    r_B: float
    rho_B: float

    @property
    def h_C(self):
        return self.h_B

    @property
    def l_C(self):
        return self.l_B

    @property
    def r_C(self):
        return self.r_B

    @property
    def rho_C(self):
        return self.rho_B

    @property
    def half_width(self):
        """Half width of the transition stripe, 2 l_B + l_D."""
        return 2 * self.l_B + self.l_D

    @property
    def trivial(self):
        return self.alpha == 0

    def to_dict(self):
        return asdict(self)


def derive_rr_params(theta, alpha, eps, tau=1.0, strict=True):
    """Parameters of the composite rotation-to-rotation wall.

    strict enforces sin α < 1/8, where the construction is the intended
    competitor; with strict=False it is built whenever the geometry still
    makes sense (sin α < 1/2)."""
    theta, alpha = float(theta), float(alpha)
    if not (eps > 0 and tau > 0):
        raise InvalidArgument("eps and tau must be positive")
    if not (THETA_MIN < theta < np.pi / 2 - THETA_MIN):
        raise ThetaDegenerateError(
            f"theta={theta} outside ({THETA_MIN}, pi/2-{THETA_MIN}); fold it using the "
            "pi/2 symmetry of the square lattice")
    if alpha < 0 or not np.isfinite(alpha):
        raise InvalidArgument("alpha must be >= 0 (swap the grains for negative alpha)")
    sa = np.sin(alpha)
    if sa >= (SIN_ALPHA_MAX if strict else 0.5):
        raise AlphaTooLargeError(
            f"sin(alpha)={sa:.4g} >= {SIN_ALPHA_MAX if strict else 0.5}: "
            "use the sharp interface competitor instead")
    st, ct = np.sin(theta), np.cos(theta)
    et = eps * tau
    inf = np.inf
    if alpha == 0:
        return RRParams(theta, 0.0, eps, tau, 1.0, 1.0, 0.0, 0.0, inf, inf, et / st, et,
                        inf, inf, et / ct, et)
    return RRParams(
        theta=theta, alpha=alpha, eps=eps, tau=tau,
        eta=np.cos(alpha) + ct * st * sa, eta_t=np.cos(alpha) - ct * st * sa,
        mu=st ** 2 * sa, mu_t=-st ** 2 * sa,
        h_D=et / (st * sa), l_D=et / sa, rho_D=et / st, r_D=et,
        h_B=et / (ct * sa), l_B=et / sa, r_B=et / ct, rho_B=et,
    )


def rr_blocks(p):
    """The three unrotated pieces (B, D, C) of the composite, each periodic."""
    B = PeriodicField(RtoCCell(RtoCParams(-p.alpha, p.eta, p.mu, p.l_B, p.h_B, p.r_B, p.rho_B)), p.h_B)
    D = PeriodicField(CtoCCell(CtoCParams(p.eta, p.eta_t, p.mu, p.mu_t, p.l_D, p.h_D, p.r_D, p.rho_D)), p.h_D)
    Ct = PeriodicField(RtoCCell(RtoCParams(p.alpha, p.eta_t, p.mu_t, p.l_C, p.h_C, p.r_C, p.rho_C)), p.h_C)
    return B, D, PointReflectedField(Ct)


def rr_defects(p, y_range):
    if p.trivial:
        return DefectSet()
    sb = p.l_D + p.l_B
    sc = p.l_D + p.l_C
    rects = (_column_rects(-sb, p.r_B, p.h_B, p.rho_B, y_range)
             + _column_rects(0.0, p.r_D, p.h_D, p.rho_D, y_range)
             + _column_rects(sc, p.r_C, p.h_C, p.rho_C, y_range))
    return DefectSet(rectangles=rects)


def build_r_to_r(p, y_range=None):
    """Composite rotation-to-rotation field: R_{θ-α} left, R_{θ+α} right.

    Returns (field, defects); defects cover y_range (default three D-periods
    each side of the origin)."""
    if p.trivial:
        return ConstantField(rot(p.theta)), DefectSet()
    B, D, C = rr_blocks(p)
    at = GluedField([TranslatedField(B, -(p.l_D + p.l_B)), D, TranslatedField(C, p.l_D + p.l_C)],
                    [-p.l_D, p.l_D])
    field = LeftMultipliedField(at, rot(p.theta))
    if y_range is None:
        y_range = _default_range(max(p.h_D, p.h_B))
    return field, rr_defects(p, y_range)


def build_sharp(theta_m, theta_p, y_range, x0=0.0):
    """I_{R-,R+} with the vertical segment {x0} x y_range as defect set."""
    f = SharpInterfaceField(rot(theta_m), rot(theta_p), x0)
    return f, DefectSet(segments=[((x0, y_range[0]), (x0, y_range[1]))])


def rr_window_half(p):
    """L = 4(4 h_B + 2 h_D): a square window holding whole periods of every column."""
    return 4 * (4 * p.h_B + 2 * p.h_D)


def construction_energy_per_length(theta, alpha, params, rtol=1e-8, strict=True):
    """Normalized energy per unit interface length of the explicit competitor:
    the composite wall, or the sharp interface (2λ) when sin α >= 1/8.
    strict=False evaluates the composite wall beyond 1/8 as well.

    Returns (value, info dict)."""
    from .energy import f_eps  # local import keeps module import order simple

    sa = np.sin(alpha)
    if alpha == 0:
        return 0.0, {"kind": "trivial"}
    sharp_value = 2.0 * params.lam
    if strict and sa >= SIN_ALPHA_MAX:
        return sharp_value, {"kind": "sharp", "sharp": sharp_value}
    p = derive_rr_params(theta, alpha, params.eps, params.tau, strict=strict)
    L = rr_window_half(p)
    win = Domain(-L, L, -L, L)
    field, S = build_r_to_r(p, y_range=(-L - p.h_B, L + p.h_B))
    e = f_eps(field, S, win, params, rtol=rtol)
    val = e.normalized / (2 * L)
    return val, {"kind": "construction", "sharp": sharp_value, "L": L, "elastic": e.elastic, "core": e.core,
                 "normalized": e.normalized}


# ---------------------------------------------------------------- vertical tiling

def tile_vertical(field, window, defects=None, copies=None, atol=1e-9):
    """Repeat the restriction of field to window with vertical period equal to
    the window height. Grid fields are tiled `copies` times (default 2);
    analytic fields become periodic on the whole line.

    Returns the tiled field, plus the replicated defect set if one is given.
    """
    H = window.y_max - window.y_min
    if isinstance(field, GridField):
        copies = copies or 2
        d = field.domain
        j0 = int(round((window.y_min - d.y_min) / d.h))
        j1 = int(round((window.y_max - d.y_min) / d.h))
        vals = field.values[j0:j1]
        top, bot = vals[-1, :, :, 0], vals[0, :, :, 0]
        if np.abs(top - bot).max() > atol:
            raise TilingIncompatibleError("top and bottom tangential traces differ")
        dom = Domain(d.x_min, d.x_max, window.y_min, window.y_min + copies * H, d.h)
        out = GridField(dom, np.concatenate([vals] * copies, axis=0))
        if defects is None:
            return out
        reps = [defects.restricted(window).translated(0, k * H) for k in range(copies)]
        S = DefectSet()
        for r in reps:
            S = S | r
        return out, S
    xs = np.linspace(window.x_min, window.x_max, 257)
    xs = 0.5 * (xs[1:] + xs[:-1])
    top = field.evaluate(xs, np.full_like(xs, window.y_max - 1e-12 * H))[:, :, 0]
    bot = field.evaluate(xs, np.full_like(xs, window.y_min + 1e-12 * H))[:, :, 0]
    if np.abs(top - bot).max() > max(atol, 1e-6):
        raise TilingIncompatibleError("top and bottom tangential traces differ")
    cy = 0.5 * (window.y_min + window.y_max)
    inner = TranslatedField(field, 0.0, -cy)
    out = TranslatedField(PeriodicField(inner, H / 2), 0.0, cy)
    if defects is None:
        return out
    copies = copies or 3
    base = defects.restricted(window)
    S = DefectSet()
    for k in range(-(copies // 2), copies - copies // 2):
        S = S | base.translated(0, k * H)
    return out, S
