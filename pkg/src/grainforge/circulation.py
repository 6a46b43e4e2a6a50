"""Discrete curl, line and weak circulations, and Burgers-vector checks."""
from dataclasses import dataclass, field as dfield

import numpy as np

from .errors import GeometryError, InvalidArgument, InvalidTestFunction, LoopThroughDefectError
from .fields import GridField, segment_integrals


class GridLoop:
    """Closed axis-aligned polygon given by its corner vertices.

    orientation is +1 for anticlockwise, -1 for clockwise (from the signed
    area). For grid fields every vertex must sit on a grid vertex."""

    def __init__(self, vertices):
        v = np.asarray(vertices, float)
        if len(v) > 1 and np.all(v[0] == v[-1]):
            v = v[:-1]
        if len(v) < 4:
            raise InvalidArgument("a loop needs at least four corners")
        w = np.roll(v, -1, axis=0)
        if np.any((v[:, 0] != w[:, 0]) & (v[:, 1] != w[:, 1])):
            raise InvalidArgument("loop edges must be axis-aligned")
        self.vertices = v
        area = 0.5 * np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1])
        if area == 0:
            raise InvalidArgument("degenerate loop")
        self.orientation = 1 if area > 0 else -1

    @classmethod
    def rectangle(cls, x0, x1, y0, y1, orientation=1):
        v = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        return cls(v if orientation > 0 else v[::-1])

    def reversed(self):
        return GridLoop(self.vertices[::-1])

    def edges(self):
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def bbox(self):
        v = self.vertices
        return v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max()

    def to_list(self):
        return self.vertices.tolist()


def _segments_hit(defects, p0, p1):
    """Does any axis-aligned segment meet a defect primitive?"""
    if defects is None or defects.is_empty:
        return False
    b = defects.boxes
    for a, c in zip(p0, p1):
        x0, x1 = sorted((a[0], c[0]))
        y0, y1 = sorted((a[1], c[1]))
        if len(b) and np.any((b[:, 0] <= x1) & (b[:, 1] >= x0) & (b[:, 2] <= y1) & (b[:, 3] >= y0)):
            return True
    if defects.polygons:
        import shapely
        line = shapely.LineString(list(map(tuple, p0)) + [tuple(p0[0])])
        return any(shapely.intersects(line, g) for g in defects.geoms)
    return False


def _grid_edge_integrals(field, p0, p1):
    d = field.domain
    h = d.h
    A = field.values
    ny, nx = A.shape[:2]
    total = np.zeros(2)
    for a, c in zip(p0, p1):
        ia = (a - [d.x_min, d.y_min]) / h
        ic = (c - [d.x_min, d.y_min]) / h
        if np.any(np.abs(ia - np.round(ia)) > 1e-7) or np.any(np.abs(ic - np.round(ic)) > 1e-7):
            raise InvalidArgument("grid loop vertices must lie on grid vertices")
        ia, ic = np.round(ia).astype(int), np.round(ic).astype(int)
        if ia[1] == ic[1]:
            j = ia[1]
            lo, hi = sorted((ia[0], ic[0]))
            cols = np.arange(lo, hi)
            below = A[max(j - 1, 0), cols] if j - 1 >= 0 else None
            above = A[j, cols] if j < ny else None
            if below is None:
                below = above
            if above is None:
                above = below
            seg = 0.5 * (below + above)[:, :, 0].sum(axis=0) * h
            total += seg * np.sign(ic[0] - ia[0])
        else:
            i = ia[0]
            lo, hi = sorted((ia[1], ic[1]))
            rows = np.arange(lo, hi)
            left = A[rows, i - 1] if i - 1 >= 0 else None
            right = A[rows, i] if i < nx else None
            if left is None:
                left = right
            if right is None:
                right = left
            seg = 0.5 * (left + right)[:, :, 1].sum(axis=0) * h
            total += seg * np.sign(ic[1] - ia[1])
    return total


def loop_circulation(field, loop, defects=None):
    """∮ A along the loop in its own orientation.

    Analytic fields are integrated exactly piece by piece. On grids the
    value on a cell edge is the mean of the two adjacent cells (the single
    adjacent cell on the domain boundary), which makes the result equal to
    the enclosed sum of discrete_curl * h^2."""
    p0, p1 = loop.edges()
    if _segments_hit(defects, p0, p1):
        raise LoopThroughDefectError("loop meets the defect set")
    if isinstance(field, GridField):
        return _grid_edge_integrals(field, p0, p1)
    return segment_integrals(field, p0, p1).sum(axis=0)


def _central(a, axis):
    """Central difference with edge replication, divided by 2 (no h)."""
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    sl_hi = [slice(None)] * a.ndim
    sl_lo = [slice(None)] * a.ndim
    sl_hi[axis] = slice(2, None)
    sl_lo[axis] = slice(None, -2)
    return 0.5 * (p[tuple(sl_hi)] - p[tuple(sl_lo)])


def discrete_curl(field):
    """Row-wise curl ∂1 A_i2 - ∂2 A_i1 per cell, central differences with
    replicated edges; shape (ny, nx, 2)."""
    A = field.values if isinstance(field, GridField) else np.asarray(field)
    h = field.h if isinstance(field, GridField) else 1.0
    return (_central(A[..., 1], 1) - _central(A[..., 0], 0)) / h


def curl_support(field, tol=1e-8):
    return np.linalg.norm(discrete_curl(field), axis=-1) > tol


def grad_c(u, h):
    """Central-difference gradient of a cell function (ny, nx) or (ny, nx, k)
    with replicated edges; returns (..., 2) with x derivative first."""
    return np.stack([_central(u, 1) / h, _central(u, 0) / h], axis=-1)


def weak_circulation(field, bump, orientation=1, defects=None):
    """Circulation around the level region of a test function.

    Returns orientation * Σ A ∇⊥φ h², with ∇⊥φ = (∂2φ, -∂1φ) by central
    differences; for φ = 1 on a region U this is the anticlockwise
    circulation around U when orientation = +1."""
    phi = np.asarray(bump, float)
    A = field.values
    if phi.shape != A.shape[:2]:
        raise InvalidTestFunction("bump must be a cell function on the field grid")
    ring = np.ones_like(phi, bool)
    ring[2:-2, 2:-2] = False
    if np.any(phi[ring] != 0):
        raise InvalidTestFunction("bump must vanish on the two outer cell rings")
    h = field.h
    g = grad_c(phi, h)
    if defects is not None and not defects.is_empty:
        X, Y = field.centers()
        moving = np.linalg.norm(g, axis=-1) > 0
        if moving.any():
            dist = defects.distance(X[moving], Y[moving])
            if np.any(dist <= np.sqrt(2) * h):
                raise InvalidTestFunction("the transition zone of the bump meets the defect set")
    perp = np.stack([g[..., 1], -g[..., 0]], axis=-1)
    return orientation * np.einsum("jiab,jib->a", A, perp) * h * h


@dataclass
class BurgersReport:
    tol: float
    lattice: float
    components: list = dfield(default_factory=list)
    composites: list = dfield(default_factory=list)
    skipped: list = dfield(default_factory=list)

    @property
    def passed(self):
        return all(c["pass"] for c in self.components) and all(c["pass"] for c in self.composites)

    @property
    def max_residual(self):
        return max([c["residual"] for c in self.components] or [0.0])

    @property
    def max_additivity_error(self):
        return max([c["error"] for c in self.composites] or [0.0])

    def to_dict(self):
        return {"tol": self.tol, "lattice": self.lattice, "pass": self.passed,
                "components": self.components, "composites": self.composites,
                "skipped": self.skipped}


def _snap_out(box, field):
    if not isinstance(field, GridField):
        return box
    d = field.domain
    h = d.h
    x0 = d.x_min + np.floor((box[0] - d.x_min) / h + 1e-9) * h
    x1 = d.x_min + np.ceil((box[1] - d.x_min) / h - 1e-9) * h
    y0 = d.y_min + np.floor((box[2] - d.y_min) / h + 1e-9) * h
    y1 = d.y_min + np.ceil((box[3] - d.y_min) / h - 1e-9) * h
    return (x0, x1, y0, y1)


def _inflate(b, m):
    return (b[0] - m, b[1] + m, b[2] - m, b[3] + m)


def _find_loop(field, defects, member_idx, comps_boxes, bboxes, margins):
    """First margin whose rectangle avoids every primitive and encloses
    exactly the members."""
    b = np.array(bboxes)[member_idx]
    bb = (b[:, 0].min(), b[:, 1].max(), b[:, 2].min(), b[:, 3].max())
    others = [k for k in range(len(bboxes)) if k not in member_idx]
    for m in margins:
        r = _snap_out(_inflate(bb, m), field)
        if isinstance(field, GridField):
            d = field.domain
            if r[0] < d.x_min or r[1] > d.x_max or r[2] < d.y_min or r[3] > d.y_max:
                continue
        loop = GridLoop.rectangle(*r)
        p0, p1 = loop.edges()
        if _segments_hit(defects, p0, p1):
            continue
        inside = False
        for k in others:
            o = bboxes[k]
            if o[0] < r[1] and o[1] > r[0] and o[2] < r[3] and o[3] > r[2]:
                inside = True
                break
        if not inside:
            return loop
    return None


def check_h2(field, defects, params, tol=None, seed=0, max_pairs=20, components=None,
             skip_boundary=False):
    """Burgers-vector quantization around every defect component.

    One rectangle per component (bounding box plus a margin of at most λε,
    snapped outward to grid edges for grid fields), each circulation rounded
    to the nearest point of τεℤ², plus composite loops around randomly
    chosen pairs of components whose joint bounding rectangle encloses no
    third component. With skip_boundary, grid components that cannot be
    enclosed because they touch the domain edge are listed under
    "skipped" instead of raising."""
    b_len = params.burgers
    tol = 1e-6 * b_len if tol is None else tol
    rep = BurgersReport(tol=tol, lattice=b_len)
    if defects.is_empty:
        return rep
    d = params.core_radius
    comps = components if components is not None else defects.component_sets(d)
    bboxes = [c.bbox() for c in comps]
    h = field.h if isinstance(field, GridField) else 0.0
    margins = [m for m in (d, 0.75 * d, 0.5 * d, 0.25 * d, 0.1 * d) if m > 0]
    if h:
        margins = sorted(set(margins + [1.5 * h, 2.5 * h]), reverse=True)
    burgers = []
    for k, c in enumerate(comps):
        loop = _find_loop(field, defects, [k], comps, bboxes, margins)
        if loop is None and skip_boundary and isinstance(field, GridField):
            dm = field.domain
            bb = bboxes[k]
            if (bb[0] - dm.x_min < 2 * dm.h + d or dm.x_max - bb[1] < 2 * dm.h + d
                    or bb[2] - dm.y_min < 2 * dm.h + d or dm.y_max - bb[3] < 2 * dm.h + d):
                rep.skipped.append({"bbox": list(map(float, bb)), "reason": "touches the domain edge"})
                burgers.append(None)
                continue
        if loop is None:
            raise GeometryError(f"no separating loop for defect component {k} with bbox {bboxes[k]}")
        circ = loop_circulation(field, loop)
        n = np.round(circ / b_len)
        res = float(np.linalg.norm(circ - n * b_len))
        burgers.append(n * b_len)
        rep.components.append({
            "bbox": list(map(float, bboxes[k])), "loop": list(map(float, loop.bbox())),
            "circulation": circ.tolist(), "lattice_vector": [int(n[0]), int(n[1])],
            "residual": res, "pass": res <= tol})
    if len(comps) > 1 and max_pairs > 0:
        rng = np.random.default_rng(seed)
        pairs = [(i, j) for i in range(len(comps)) for j in range(i + 1, len(comps))]
        order = rng.permutation(len(pairs))
        done = 0
        for t in order:
            if done >= max_pairs:
                break
            i, j = pairs[t]
            if burgers[i] is None or burgers[j] is None:
                continue
            loop = _find_loop(field, defects, [i, j], comps, bboxes, margins)
            if loop is None:
                continue
            circ = loop_circulation(field, loop)
            err = float(np.linalg.norm(circ - burgers[i] - burgers[j]))
            rep.composites.append({"members": [int(i), int(j)], "loop": list(map(float, loop.bbox())),
                                   "circulation": circ.tolist(), "error": err,
                                   "pass": err <= 2 * tol})
            done += 1
    return rep
