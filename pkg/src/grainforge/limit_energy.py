"""Polygonal grain partitions, the limit energy F₀ and recovery fields."""
import csv
import json
from dataclasses import dataclass, field as dfield

import numpy as np
import shapely

from .cell_problem import canonical_angles, phi as phi_default
from .constructions import SIN_ALPHA_MAX, THETA_MIN, build_r_to_r, derive_rr_params
from .energy import dist2_so2, elastic_energy
from .errors import (GeometryError, InvalidArgument, NotMicroRotationError, SpacingError,
                     UsageError)
from .fields import (AnalyticField, DefectSet, Domain, GridField, ModelParams, Rotation2,
                     SharpInterfaceField, rot)

AREA_TOL = 1e-10


def _angle(r):
    if isinstance(r, Rotation2):
        return r.theta
    return float(r)


@dataclass
class Edge:
    p0: tuple
    p1: tuple
    normal: tuple
    i: int
    j: int

    @property
    def length(self):
        return float(np.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]))

    def to_dict(self):
        return {"p0": list(self.p0), "p1": list(self.p1), "normal": list(self.normal),
                "grains": [self.i, self.j], "length": self.length}


class PolygonalPartition:
    """Grains given as simple polygons with a rotation angle each.

    Interior edges are the straight pieces shared by two grains; the normal
    of an edge points from grain i into grain j (i < j)."""

    def __init__(self, grains):
        if not grains:
            raise InvalidArgument("a partition needs at least one grain")
        self.polygons = []
        self.angles = []
        for verts, r in grains:
            poly = shapely.Polygon(verts)
            if not poly.is_valid or poly.area <= 0:
                raise GeometryError("grain polygons must be simple with positive area")
            self.polygons.append(shapely.orient_polygons(poly) if hasattr(shapely, "orient_polygons")
                                 else shapely.geometry.polygon.orient(poly))
            self.angles.append(_angle(r))
        self.region = shapely.union_all(self.polygons)
        total = sum(p.area for p in self.polygons)
        if abs(total - self.region.area) > AREA_TOL * max(1.0, total):
            raise GeometryError("grain polygons overlap")
        if self.region.geom_type != "Polygon" or len(self.region.interiors):
            raise GeometryError("grains must tile a simply connected polygonal domain")
        self.edges = self._edges()

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        grains = obj["grains"] if isinstance(obj, dict) else obj
        return cls([(g["polygon"], g["angle"]) for g in grains])

    def to_json(self):
        return {"grains": [{"polygon": [list(c) for c in p.exterior.coords[:-1]], "angle": a}
                           for p, a in zip(self.polygons, self.angles)]}

    def _edges(self):
        out = []
        n = len(self.polygons)
        for i in range(n):
            for j in range(i + 1, n):
                common = self.polygons[i].boundary.intersection(self.polygons[j].boundary)
                if common.is_empty:
                    continue
                lines = [g for g in getattr(common, "geoms", [common]) if g.geom_type in
                         ("LineString", "MultiLineString")]
                if not lines:
                    continue
                merged = shapely.line_merge(shapely.union_all(lines))
                for ls in getattr(merged, "geoms", [merged]):
                    c = np.asarray(ls.coords)
                    for a, b in zip(c[:-1], c[1:]):
                        self._add_edge(out, a, b, i, j)
        return out

    def _add_edge(self, out, a, b, i, j):
        t = b - a
        L = np.hypot(*t)
        if L < 1e-14:
            return
        nrm = np.array([t[1], -t[0]]) / L
        mid = 0.5 * (a + b)
        probe = mid + 1e-7 * max(L, 1.0) * nrm
        if not self.polygons[j].contains(shapely.Point(probe)):
            nrm = -nrm
        out.append(Edge(tuple(map(float, a)), tuple(map(float, b)), tuple(map(float, nrm)), i, j))

    def bounds(self):
        return self.region.bounds

    def values(self, x, y):
        """Piecewise-constant rotation field at points (n, 2, 2)."""
        x, y = np.asarray(x, float).ravel(), np.asarray(y, float).ravel()
        out = np.full((x.size, 2, 2), np.nan)
        for poly, a in zip(self.polygons, self.angles):
            inside = shapely.contains_xy(poly, x, y) | shapely.intersects_xy(poly.boundary, x, y)
            todo = inside & np.isnan(out[:, 0, 0])
            out[todo] = rot(a)
        return out

    def grain_of(self, x, y):
        x, y = np.asarray(x, float).ravel(), np.asarray(y, float).ravel()
        g = np.full(x.size, -1)
        for k, poly in enumerate(self.polygons):
            inside = shapely.contains_xy(poly, x, y)
            g[(g < 0) & inside] = k
        return g


# ---------------------------------------------------------------- Φ sources

class PhiTable:
    """Nearest-neighbor lookup of Φ on the folded (θ, α) of each query."""

    def __init__(self, theta, alpha, value):
        self.theta = np.asarray(theta, float)
        self.alpha = np.asarray(alpha, float)
        self.value = np.asarray(value, float)
        if not (self.theta.shape == self.alpha.shape == self.value.shape) or not self.value.size:
            raise UsageError("phi table needs equal-length, non-empty theta/alpha/value columns")

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
        try:
            return cls([float(r["theta"]) for r in rows], [float(r["alpha"]) for r in rows],
                       [float(r["value"]) for r in rows])
        except (KeyError, ValueError) as e:
            raise UsageError(f"bad phi table {path}: {e}") from None

    def __call__(self, Rm, Rp, n):
        th, al = canonical_angles(Rm, Rp, n)
        if al == 0:
            return 0.0
        # distance in θ is taken on the circle of period π/2
        dth = np.abs(self.theta % (np.pi / 2) - th)
        dth = np.minimum(dth, np.pi / 2 - dth)
        k = int(np.argmin(dth ** 2 + (self.alpha - al) ** 2))
        return float(self.value[k])


def _phi_callable(source):
    if source is None or source == "construction":
        return lambda Rm, Rp, n: phi_default(Rm, Rp, n, source="construction")
    if source == "optimize":
        return lambda Rm, Rp, n: phi_default(Rm, Rp, n, source="optimize")
    if callable(source):
        return source
    raise InvalidArgument("phi_source must be 'construction', 'optimize' or a callable")


def _canonical_query(a_i, a_j, nrm):
    """Order the pair so that (Rᵢ, Rⱼ, ν) and (Rⱼ, Rᵢ, -ν) give the same call."""
    nrm = tuple(float(v) for v in nrm)
    flip = tuple(-v for v in nrm)
    wi, wj = np.mod(a_i, 2 * np.pi), np.mod(a_j, 2 * np.pi)
    if wi > wj or (wi == wj and nrm > flip):
        return a_j, a_i, flip
    return a_i, a_j, nrm


def f0_evaluate(partition, phi_source=None, report=False):
    """Σ over interior edges of length times Φ(Rᵢ, Rⱼ, νᵢⱼ)."""
    f = _phi_callable(phi_source)
    total = 0.0
    rows = []
    for e in partition.edges:
        ai, aj = partition.angles[e.i], partition.angles[e.j]
        if np.isclose(np.cos(ai - aj), 1.0, rtol=0, atol=1e-15) and abs(np.sin(ai - aj)) < 1e-15:
            val = 0.0
        else:
            qa, qb, qn = _canonical_query(ai, aj, e.normal)
            val = float(f(Rotation2(qa), Rotation2(qb), np.asarray(qn)))
        total += e.length * val
        rows.append({**e.to_dict(), "phi": val, "contribution": e.length * val})
    if report:
        return total, rows
    return total


# ---------------------------------------------------------------- recovery

@dataclass
class EdgePatch:
    edge: Edge
    angle: float            # frame angle: local e1 maps to the edge normal
    center: tuple
    half_len: float
    s0: float               # local ξ2 extent of the wall rectangle
    s1: float
    kind: str               # wall | sharp | none
    theta: float = 0.0
    alpha: float = 0.0
    quarter: int = 0
    params: object = None
    wall: object = None
    field: object = None
    defects: DefectSet = None

    def local(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        return c * dx + s * dy, -s * dx + c * dy


class RecoveryField(AnalyticField):
    """Partition values, replaced by the frame-rotated wall inside each
    interface rectangle. Point evaluation only."""
    kind = "analytic"

    def __init__(self, partition, patches, delta):
        self.partition, self.patches, self.delta = partition, patches, delta

    def evaluate(self, x, y):
        x, y = np.asarray(x, float).ravel(), np.asarray(y, float).ravel()
        out = self.partition.values(x, y)
        for p in self.patches:
            if p.kind != "wall":
                continue
            u, v = p.local(x, y)
            inside = (np.abs(u) <= self.delta / 2) & (v >= p.s0) & (v <= p.s1)
            if inside.any():
                R = rot(p.angle)
                out[inside] = p.field.evaluate(u[inside], v[inside]) @ R.T
        return out

    def region(self, x, y):
        raise NotImplementedError("recovery fields support point evaluation only")

    def potential(self, x, y, label):
        raise NotImplementedError("recovery fields support point evaluation only")

    def describe(self):
        return {"type": "recovery", "delta": self.delta, "patches": len(self.patches)}


@dataclass
class Recovery:
    field: RecoveryField
    defects: DefectSet
    patches: list
    junctions: list
    delta: float
    params: ModelParams
    info: dict = dfield(default_factory=dict)

    def energy(self, rtol=1e-7):
        """Normalized F_ε over the partition domain: wall elastic energy by
        patch quadrature in local frames plus the exact core area of all
        defects; the partition itself is elastic-free."""
        el = 0.0
        per_edge = []
        d = self.params.core_radius
        for p in self.patches:
            e_el = 0.0
            if p.kind == "wall":
                win = Domain(-self.delta / 2, self.delta / 2, p.s0, p.s1)
                S = p.defects | DefectSet(segments=[((0.0, p.s0 - 10 * d), (0.0, p.s0)),
                                                   ((0.0, p.s1), (0.0, p.s1 + 10 * d)),
                                                   ((-self.delta, p.s0), (self.delta, p.s0)),
                                                   ((-self.delta, p.s1), (self.delta, p.s1))])
                e_el = elastic_energy(p.wall, S, win, self.params, rtol=rtol)
            el += e_el
            per_edge.append(e_el)
        region = self.field.partition.region
        core = float(shapely.union_all(
            [g.buffer(d, quad_segs=64) for g in self.defects.all_geoms()]).intersection(region).area)
        eps = self.params.eps
        return {"elastic": el, "core": core, "total": el + core, "normalized": (el + core) / eps,
                "edge_elastic": per_edge}


def _delta_auto(partition, eps, tau, lam):
    """max(√ε, 4 × the widest wall half-width over the edges)."""
    w = 0.0
    for e in partition.edges:
        k = _edge_kind(partition, e, eps, tau)
        if k[0] == "wall":
            w = max(w, k[-1].half_width)
    return max(np.sqrt(eps), 4 * w)


def _edge_kind(partition, e, eps, tau):
    """('none'|'sharp'|'wall', angle of the frame, θ, α, quarter turns, params)."""
    ai, aj = partition.angles[e.i], partition.angles[e.j]
    phin = float(np.arctan2(e.normal[1], e.normal[0]))
    am, ap = ai + phin, aj + phin
    alpha = 0.5 * float(np.angle(np.exp(1j * (ap - am))))
    if alpha == 0:
        return ("none", phin, 0.0, 0.0, 0, None)
    if alpha < 0:
        phin += np.pi
        am, ap = aj + phin, ai + phin
        alpha = -alpha
    theta = am + alpha
    q = int(np.floor(theta / (np.pi / 2)))
    tf = theta - q * np.pi / 2
    if not (THETA_MIN < tf < np.pi / 2 - THETA_MIN) or np.sin(alpha) >= SIN_ALPHA_MAX:
        return ("sharp", phin, theta, alpha, q, None)
    return ("wall", phin, tf, alpha, q, derive_rr_params(tf, alpha, eps, tau))


class _Quarter(AnalyticField):
    """Left multiplication by a quarter-turn power, evaluation only."""

    def __init__(self, child, q):
        self.child, self.R = child, rot(q * np.pi / 2)

    def evaluate(self, x, y):
        return self.R @ self.child.evaluate(x, y)


def build_recovery(partition, eps, delta_rule="auto", tau=1.0, lam=1.0):
    """Recovery field and defect set at scale ε.

    Each interior edge gets a rectangle of width δ around it, shortened by
    2√2δ + δ/2 at every end that is not on the domain boundary, filled with
    the periodic wall for its frame-rotated pair; the rest keeps the
    partition values. The edge pieces outside the rectangles and the
    boundary of a square of half side 2δ around each interior junction go
    into the defect set."""
    params = ModelParams(eps, tau, lam)
    if callable(delta_rule):
        delta = float(delta_rule(eps))
    elif delta_rule == "auto":
        delta = _delta_auto(partition, eps, tau, lam)
    else:
        delta = float(delta_rule)
    if not (eps < delta < 1):
        raise SpacingError(f"delta={delta:.4g} must satisfy eps < delta < 1")
    outer = partition.region.boundary
    shrink = 2 * np.sqrt(2) * delta + delta / 2
    patches, junctions = [], set()
    segs, polys = [], []
    for e in partition.edges:
        kind, ang, th, al, q, p = _edge_kind(partition, e, eps, tau)
        a, b = np.asarray(e.p0), np.asarray(e.p1)
        c = 0.5 * (a + b)
        hl = 0.5 * e.length
        nrm = np.array([np.cos(ang), np.sin(ang)])
        tang = np.array([-nrm[1], nrm[0]])
        ends = {}
        for pt in (a, b):
            s = float(np.dot(pt - c, tang))
            on_outer = outer.distance(shapely.Point(pt)) < 1e-12
            ends[np.sign(s)] = (s, on_outer)
            if not on_outer:
                junctions.add((round(float(pt[0]), 12), round(float(pt[1]), 12)))
        s0 = -hl if ends[-1.0][1] else -hl + shrink
        s1 = hl if ends[1.0][1] else hl - shrink
        patch = EdgePatch(e, ang, tuple(c), hl, s0, s1, kind, th, al, q, p)
        if kind == "wall":
            if p.half_width > delta / 2:
                raise SpacingError(f"wall half-width {p.half_width:.4g} exceeds delta/2 = {delta / 2:.4g}")
            if s1 - s0 <= 0:
                raise SpacingError("edge too short for its junction allowance")
            wall, S = build_r_to_r(p, y_range=(s0 - 2 * p.h_B, s1 + 2 * p.h_B))
            patch.wall = wall
            patch.field = _Quarter(wall, q) if q % 4 else wall
            patch.defects = S.restricted(Domain(-delta / 2, delta / 2, s0, s1))
            R = rot(ang)
            for bx in patch.defects.boxes:
                corners = np.array([[bx[0], bx[2]], [bx[1], bx[2]], [bx[1], bx[3]], [bx[0], bx[3]]])
                corners = corners @ R.T + c
                if bx[0] == bx[1] and bx[2] == bx[3]:
                    polys.append([tuple(corners[0])])
                elif bx[0] == bx[1] or bx[2] == bx[3]:
                    polys.append([tuple(corners[0]), tuple(corners[2])])
                else:
                    polys.append([tuple(v) for v in corners])
            for s in (s0, s1):
                if abs(abs(s) - hl) > 1e-15:
                    pa = c + s * tang - delta / 2 * nrm
                    pb = c + s * tang + delta / 2 * nrm
                    polys.append([tuple(pa), tuple(pb)])
            if s0 > -hl:
                polys.append([tuple(c - hl * tang), tuple(c + s0 * tang)])
            if s1 < hl:
                polys.append([tuple(c + s1 * tang), tuple(c + hl * tang)])
        elif kind == "sharp":
            polys.append([tuple(a), tuple(b)])
        patches.append(patch)
    rects = [shapely.Polygon([(-delta / 2, p.s0), (delta / 2, p.s0), (delta / 2, p.s1), (-delta / 2, p.s1)])
             for p in patches if p.kind == "wall"]
    placed = []
    for p, r in zip([p for p in patches if p.kind == "wall"], rects):
        g = shapely.affinity.rotate(r, p.angle, origin=(0, 0), use_radians=True)
        placed.append(shapely.affinity.translate(g, *p.center))
    for k in range(len(placed)):
        for m in range(k + 1, len(placed)):
            if placed[k].intersection(placed[m]).area > 0:
                raise SpacingError("interface rectangles overlap; reduce delta")
    jlist = sorted(junctions)
    for (jx, jy) in jlist:
        r = 2 * delta
        segs += [((jx - r, jy - r), (jx + r, jy - r)), ((jx + r, jy - r), (jx + r, jy + r)),
                 ((jx + r, jy + r), (jx - r, jy + r)), ((jx - r, jy + r), (jx - r, jy - r))]
        for pk, pl in zip([p for p in patches if p.kind == "wall"], placed):
            if pl.intersects(shapely.box(jx - r, jy - r, jx + r, jy + r)):
                raise SpacingError("a junction square meets an interface rectangle")
    defects = DefectSet(segments=segs, polygons=polys)
    field = RecoveryField(partition, patches, delta)
    info = {"delta": delta, "edges": len(patches), "walls": sum(p.kind == "wall" for p in patches),
            "junctions": len(jlist), "shrink": shrink}
    return Recovery(field, defects, patches, jlist, delta, params, info)


def recovery_bound(rec, phi_source=None, M=None):
    """Terms of the energy bound: wall part (Σ rectangle length × Φ) and the
    junction allowance M δ with M the measured remainder coefficient."""
    f = _phi_callable(phi_source)
    part = rec.field.partition
    wall = 0.0
    for p in rec.patches:
        if p.kind == "none":
            continue
        ai, aj = part.angles[p.edge.i], part.angles[p.edge.j]
        qa, qb, qn = _canonical_query(ai, aj, p.edge.normal)
        val = f(Rotation2(qa), Rotation2(qb), np.asarray(qn))
        length = (p.s1 - p.s0) if p.kind == "wall" else 2 * p.half_len
        wall += length * val
    e = rec.energy()
    rest = e["normalized"] - wall
    return {"energy": e["normalized"], "wall_term": wall, "remainder": rest,
            "remainder_over_delta": rest / rec.delta}


# ---------------------------------------------------------------- micro-rotations

@dataclass
class MicroRotationCheck:
    jump_only: bool
    diffuse: float
    jump: float
    jump_cells: np.ndarray
    threshold: float

    def to_dict(self):
        return {"jump_only": self.jump_only, "diffuse": self.diffuse, "jump": self.jump,
                "jump_cells": int(self.jump_cells.sum()), "threshold": self.threshold}


def micro_rotation_check(field, tol=1e-3):
    """Split the cell-difference mass of a rotation-valued grid field into
    a diffuse part (differences <= 10 tol, counted as |ΔA| h) and a jump
    part (larger differences, marking both cells). Smooth variation only
    shows up as diffuse when h |∇A| stays below 10 tol."""
    A = field.values
    if np.sqrt(dist2_so2(A)).max() > tol:
        raise NotMicroRotationError("field values are farther than tol from SO(2)")
    h = field.h
    thr = 10 * tol
    jump_cells = np.zeros(A.shape[:2], bool)
    diffuse = jump = 0.0
    for axis in (0, 1):
        d = np.diff(A, axis=axis)
        n = np.sqrt(np.sum(d ** 2, axis=(2, 3)))
        small = n <= thr
        diffuse += float(n[small].sum() * h)
        jump += float(n[~small].sum() * h)
        big = ~small
        if axis == 0:
            jump_cells[:-1] |= big
            jump_cells[1:] |= big
        else:
            jump_cells[:, :-1] |= big
            jump_cells[:, 1:] |= big
    area = field.domain.area
    return MicroRotationCheck(diffuse <= tol * area, diffuse, jump, jump_cells, thr)
