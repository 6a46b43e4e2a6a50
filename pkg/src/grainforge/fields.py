"""Matrices, rotations, domains, matrix fields and defect sets.

Analytic fields are piecewise closed-form maps on the plane. Besides point
evaluation every analytic field knows its region labels, an antiderivative
(potential) per region, and where a horizontal or vertical line crosses a
region boundary. Line integrals along axis-aligned segments are then exact
sums of potential differences.
"""
from dataclasses import dataclass
import io
import struct

import numpy as np
import shapely
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateSampleError, DomainMismatchError, InvalidArgument
from .quadrature import sweep_y


# ---------------------------------------------------------------- basic types

@dataclass(frozen=True)
class Matrix2:
    a11: float
    a12: float
    a21: float
    a22: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.a11, self.a12, self.a21, self.a22])):
            raise InvalidArgument("matrix entries must be finite")

    @property
    def array(self):
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, float)
        return cls(a[0, 0], a[0, 1], a[1, 0], a[1, 1])


@dataclass(frozen=True)
class Rotation2:
    theta: float

    def __post_init__(self):
        if not np.isfinite(self.theta):
            raise InvalidArgument("rotation angle must be finite")

    @property
    def matrix(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def array(self):
        return self.matrix

    def __matmul__(self, other):
        if isinstance(other, Rotation2):
            return Rotation2(self.theta + other.theta)
        return self.matrix @ np.asarray(other)

    def inverse(self):
        return Rotation2(-self.theta)

    def distance(self, other):
        """Frobenius distance |R - R'| computed from the angle gap."""
        return 2 * np.sqrt(2) * abs(np.sin((other.theta - self.theta) / 2))


def rotation_from_angle(theta):
    return Rotation2(float(theta))


def shear_matrix(eta, mu):
    return Matrix2(1.0, float(mu), 0.0, float(eta))


def as_array(m):
    if isinstance(m, (Matrix2, Rotation2)):
        return m.array
    return np.asarray(m, float)


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def shear(eta, mu):
    return np.array([[1.0, mu], [0.0, eta]])


@dataclass(frozen=True)
class Domain:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    h: float = None

    def __post_init__(self):
        vals = [self.x_min, self.x_max, self.y_min, self.y_max]
        if not np.all(np.isfinite(vals)):
            raise InvalidArgument("domain bounds must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgument("empty domain")
        if self.h is not None:
            if not self.h > 0:
                raise InvalidArgument("grid spacing must be positive")
            for side in (self.x_max - self.x_min, self.y_max - self.y_min):
                k = side / self.h
                if abs(k - round(k)) > 1e-9 * max(1.0, k):
                    raise InvalidArgument(f"h={self.h} does not divide side {side}")

    @classmethod
    def square(cls, half, h=None, cx=0.0, cy=0.0):
        return cls(cx - half, cx + half, cy - half, cy + half, h)

    @property
    def nx(self):
        return int(round((self.x_max - self.x_min) / self.h))

    @property
    def ny(self):
        return int(round((self.y_max - self.y_min) / self.h))

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def with_h(self, h):
        return Domain(self.x_min, self.x_max, self.y_min, self.y_max, h)

    def centers(self):
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.h
        ys = self.y_min + (np.arange(self.ny) + 0.5) * self.h
        return xs, ys

    def contains(self, other, slack=1e-12):
        s = slack * max(1.0, abs(self.x_max - self.x_min), abs(self.y_max - self.y_min))
        return (other.x_min >= self.x_min - s and other.x_max <= self.x_max + s
                and other.y_min >= self.y_min - s and other.y_max <= self.y_max + s)

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "h": self.h}


@dataclass(frozen=True)
class ModelParams:
    eps: float
    tau: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not (self.eps > 0 and self.tau > 0):
            raise InvalidArgument("eps and tau must be positive")
        if not self.lam >= 1:
            raise InvalidArgument("lambda must be >= 1")

    @property
    def core_radius(self):
        return self.lam * self.eps

    @property
    def burgers(self):
        return self.tau * self.eps

    def to_dict(self):
        return {"eps": self.eps, "tau": self.tau, "lambda": self.lam}


# ---------------------------------------------------------------- defect sets

class DefectSet:
    """Finite union of closed axis-aligned boxes (rectangles, segments, points)
    and, optionally, arbitrary polygons or polylines."""

    def __init__(self, rectangles=(), segments=(), points=(), polygons=()):
        boxes, kinds = [], []
        for x0, x1, y0, y1 in rectangles:
            boxes.append((min(x0, x1), max(x0, x1), min(y0, y1), max(y0, y1)))
            kinds.append("rect")
        for (xa, ya), (xb, yb) in segments:
            if xa != xb and ya != yb:
                raise InvalidArgument("segments must be horizontal or vertical")
            boxes.append((min(xa, xb), max(xa, xb), min(ya, yb), max(ya, yb)))
            kinds.append("seg")
        for px, py in points:
            boxes.append((px, px, py, py))
            kinds.append("point")
        self.boxes = np.array(boxes, float).reshape(-1, 4)
        if not np.all(np.isfinite(self.boxes)):
            raise InvalidArgument("defect primitives must be finite")
        self.kinds = tuple(kinds)
        self.polygons = tuple(tuple(map(tuple, np.asarray(p, float))) for p in polygons)
        self._geoms = None

    @classmethod
    def from_boxes(cls, boxes, kinds=None, polygons=()):
        out = cls(polygons=polygons)
        out.boxes = np.array(boxes, float).reshape(-1, 4)
        if kinds is None:
            kinds = ["rect"] * len(out.boxes)
        out.kinds = tuple(kinds)
        return out

    @classmethod
    def from_mask(cls, mask, domain):
        """Closed cells of a boolean cell mask, merged into maximal row runs
        and then stacked vertically where runs coincide."""
        mask = np.asarray(mask, bool)
        h = domain.h
        boxes = []
        open_runs = {}
        for j in range(mask.shape[0] + 1):
            runs = set()
            if j < mask.shape[0]:
                row = np.concatenate([[False], mask[j], [False]])
                d = np.diff(row.astype(np.int8))
                starts = np.flatnonzero(d == 1)
                ends = np.flatnonzero(d == -1)
                runs = set(zip(starts.tolist(), ends.tolist()))
            nxt = {}
            for run, j0 in open_runs.items():
                if run in runs:
                    nxt[run] = j0
                else:
                    boxes.append((run, j0, j))
            for run in runs:
                if run not in nxt:
                    nxt[run] = j
            open_runs = nxt
        boxes.sort(key=lambda b: (b[1], b[0]))
        out = [(domain.x_min + s * h, domain.x_min + e * h,
                domain.y_min + j0 * h, domain.y_min + j1 * h) for (s, e), j0, j1 in boxes]
        return cls(rectangles=out)

    @property
    def is_empty(self):
        return len(self.boxes) == 0 and not self.polygons

    def __len__(self):
        return len(self.boxes) + len(self.polygons)

    @property
    def geoms(self):
        if self._geoms is None:
            g = []
            for p in self.polygons:
                if len(p) == 1:
                    g.append(shapely.Point(p[0]))
                elif len(p) == 2:
                    g.append(shapely.LineString(p))
                else:
                    g.append(shapely.Polygon(p))
            self._geoms = g
        return self._geoms

    def all_geoms(self):
        bx = [shapely.box(x0, y0, x1, y1) if (x1 > x0 and y1 > y0)
              else (shapely.LineString([(x0, y0), (x1, y1)]) if (x1 > x0 or y1 > y0)
                    else shapely.Point(x0, y0))
              for x0, x1, y0, y1 in self.boxes]
        return bx + list(self.geoms)

    def __or__(self, other):
        out = DefectSet.from_boxes(np.concatenate([self.boxes, other.boxes]),
                                   self.kinds + other.kinds,
                                   self.polygons + other.polygons)
        return out

    def translated(self, dx, dy):
        b = self.boxes + np.array([dx, dx, dy, dy])
        polys = [np.asarray(p) + [dx, dy] for p in self.polygons]
        return DefectSet.from_boxes(b, self.kinds, polys)

    def reflected(self):
        b = -self.boxes[:, [1, 0, 3, 2]]
        polys = [-np.asarray(p) for p in self.polygons]
        return DefectSet.from_boxes(b, self.kinds, polys)

    def subset(self, idx):
        idx = list(idx)
        nb = len(self.boxes)
        bi = [i for i in idx if i < nb]
        pi = [i - nb for i in idx if i >= nb]
        return DefectSet.from_boxes(self.boxes[bi], [self.kinds[i] for i in bi],
                                    [self.polygons[i] for i in pi])

    def restricted(self, window, margin=0.0):
        """Primitives meeting the window inflated by margin."""
        b = self.boxes
        keep = ((b[:, 1] >= window.x_min - margin) & (b[:, 0] <= window.x_max + margin)
                & (b[:, 3] >= window.y_min - margin) & (b[:, 2] <= window.y_max + margin))
        idx = list(np.flatnonzero(keep))
        if self.polygons:
            wb = shapely.box(window.x_min, window.y_min, window.x_max, window.y_max)
            for k, g in enumerate(self.geoms):
                if shapely.distance(g, wb) <= margin:
                    idx.append(len(b) + k)
        return self.subset(idx)

    def bbox(self):
        parts = []
        if len(self.boxes):
            parts.append([self.boxes[:, 0].min(), self.boxes[:, 1].max(),
                          self.boxes[:, 2].min(), self.boxes[:, 3].max()])
        for p in self.polygons:
            p = np.asarray(p)
            parts.append([p[:, 0].min(), p[:, 0].max(), p[:, 1].min(), p[:, 1].max()])
        parts = np.array(parts)
        return (parts[:, 0].min(), parts[:, 1].max(), parts[:, 2].min(), parts[:, 3].max())

    # -- geometry queries

    def distance(self, x, y, chunk=2_000_000):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        shape = np.broadcast(x, y).shape
        x, y = np.broadcast_to(x, shape).ravel(), np.broadcast_to(y, shape).ravel()
        out = np.full(x.shape, np.inf)
        b = self.boxes
        if len(b):
            step = max(1, chunk // len(b))
            for s in range(0, x.size, step):
                xs, ys = x[s:s + step, None], y[s:s + step, None]
                dx = np.maximum(np.maximum(b[:, 0] - xs, xs - b[:, 1]), 0.0)
                dy = np.maximum(np.maximum(b[:, 2] - ys, ys - b[:, 3]), 0.0)
                out[s:s + step] = np.sqrt(dx * dx + dy * dy).min(axis=1)
        if self.polygons:
            pts = shapely.points(x, y)
            for g in self.geoms:
                out = np.minimum(out, shapely.distance(pts, g))
        return out.reshape(shape)

    def hcover(self, y, d):
        """x-intervals of the closed d-neighborhood of each box on the line at
        height y. Returns lo, hi of shape (n, m), NaN where the line misses."""
        if self.polygons:
            raise InvalidArgument("line covers are only available for axis-aligned primitives")
        y = np.asarray(y, float)[:, None]
        b = self.boxes
        ey = np.maximum(np.maximum(b[:, 2] - y, y - b[:, 3]), 0.0)
        w2 = d * d - ey * ey
        w = np.sqrt(np.where(w2 >= 0, w2, np.nan))
        return b[:, 0] - w, b[:, 1] + w

    def ybreaks(self, d):
        b = self.boxes
        return np.concatenate([b[:, 2] - d, b[:, 2], b[:, 3], b[:, 3] + d])

    def _pair_adjacency(self, d):
        nb = len(self.boxes)
        n = len(self)
        rows, cols = [], []
        if nb > 1:
            b = self.boxes
            cx = 0.5 * (b[:, 0] + b[:, 1])
            cy = 0.5 * (b[:, 2] + b[:, 3])
            rad = 0.5 * np.hypot(b[:, 1] - b[:, 0], b[:, 3] - b[:, 2])
            tree = cKDTree(np.c_[cx, cy])
            pairs = tree.query_pairs(2 * d + 2 * rad.max() + 1e-12, output_type="ndarray")
            if len(pairs):
                i, j = pairs[:, 0], pairs[:, 1]
                gx = np.maximum(np.maximum(b[j, 0] - b[i, 1], b[i, 0] - b[j, 1]), 0)
                gy = np.maximum(np.maximum(b[j, 2] - b[i, 3], b[i, 2] - b[j, 3]), 0)
                ok = np.hypot(gx, gy) <= 2 * d
                rows += list(i[ok])
                cols += list(j[ok])
        if self.polygons:
            allg = self.all_geoms()
            for k in range(nb, n):
                for i in range(n):
                    if i != k and shapely.distance(allg[k], allg[i]) <= 2 * d:
                        rows.append(k)
                        cols.append(i)
        return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def components(self, d):
        """Partition of primitives whose closed d-neighborhoods connect.

        Components are returned as sorted index lists, ordered by the lower
        left corner of their bounding box, so the result does not depend on
        insertion order up to the re-indexing of primitives."""
        n = len(self)
        if n == 0:
            return []
        _, lab = connected_components(self._pair_adjacency(d), directed=False)
        groups = {}
        for i, k in enumerate(lab):
            groups.setdefault(k, []).append(i)
        comps = [sorted(g) for g in groups.values()]
        keys = [self.subset(g).bbox() for g in comps]
        order = sorted(range(len(comps)), key=lambda i: (keys[i][2], keys[i][0], keys[i][3], keys[i][1]))
        comps = [comps[i] for i in order]
        return comps

    def component_sets(self, d):
        return [self.subset(c) for c in self.components(d)]

    def neighborhood_area(self, d, window, rtol=1e-11, exact_limit=400):
        """|B_d(S) ∩ window|.

        Up to exact_limit boxes the area is a y-sweep of the union length of
        the disc-rounded boxes (exact up to adaptive quadrature). Larger or
        polygonal sets use a shapely buffer union with 64 segments per
        quarter circle."""
        if self.is_empty:
            return 0.0
        sub = self.restricted(window, d)
        if sub.is_empty:
            return 0.0
        if sub.polygons or len(sub.boxes) > exact_limit:
            geo = shapely.unary_union([shapely.buffer(g, d, quad_segs=64) if d > 0 else g
                                       for g in sub.all_geoms()])
            wb = shapely.box(window.x_min, window.y_min, window.x_max, window.y_max)
            return float(shapely.area(shapely.intersection(geo, wb)))
        xa, xb = window.x_min, window.x_max

        def inner(y):
            lo, hi = sub.hcover(y, d)
            return union_length(lo, hi, xa, xb)

        scale = window.area
        return sweep_y(inner, window.y_min, window.y_max, sub.ybreaks(d),
                       rtol=rtol, atol=1e-15 * scale)

    # -- serialization

    def to_dict(self):
        out = {"rectangles": [], "segments": [], "points": [], "polygons": []}
        for (x0, x1, y0, y1), k in zip(self.boxes.tolist(), self.kinds):
            if k == "rect":
                out["rectangles"].append([x0, x1, y0, y1])
            elif k == "seg":
                out["segments"].append([[x0, y0], [x1, y1]])
            else:
                out["points"].append([x0, y0])
        out["polygons"] = [list(map(list, p)) for p in self.polygons]
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(rectangles=d.get("rectangles", ()),
                   segments=[tuple(map(tuple, s)) for s in d.get("segments", ())],
                   points=[tuple(p) for p in d.get("points", ())],
                   polygons=d.get("polygons", ()))


def union_length(lo, hi, xa, xb):
    """Row-wise length of the union of intervals [lo, hi] clipped to [xa, xb]."""
    lo = np.clip(np.nan_to_num(lo, nan=xa), xa, xb)
    hi = np.clip(np.nan_to_num(hi, nan=xa), xa, xb)
    hi = np.maximum(hi, lo)
    order = np.argsort(lo, axis=1)
    lo = np.take_along_axis(lo, order, axis=1)
    hi = np.take_along_axis(hi, order, axis=1)
    prev = np.maximum.accumulate(hi, axis=1)
    prev = np.concatenate([np.full((lo.shape[0], 1), -np.inf), prev[:, :-1]], axis=1)
    return np.clip(hi - np.maximum(lo, prev), 0.0, None).sum(axis=1)


# ---------------------------------------------------------------- analytic fields

_NOBREAK = np.empty((0, 0))


class AnalyticField:
    """Piecewise closed-form field.

    Subclasses implement evaluate(x, y) -> (n, 2, 2), region(x, y) -> int64,
    potential(x, y, label) -> (n, 2) with grad potential = field in that
    region, hbreaks(y, xa, xb) and vbreaks(x, ya, yb) -> (n, K) candidate
    crossing coordinates (NaN allowed, extras harmless) and ybreaks(ya, yb)
    -> heights where the horizontal break structure changes.
    """
    kind = "analytic"

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return self.evaluate(x.ravel(), y.ravel()).reshape(x.shape + (2, 2))

    def hbreaks(self, y, xa, xb):
        return np.empty((np.size(y), 0))

    def vbreaks(self, x, ya, yb):
        return np.empty((np.size(x), 0))

    def ybreaks(self, ya, yb):
        return np.empty(0)

    def describe(self):
        return {"type": type(self).__name__}


class ConstantField(AnalyticField):
    def __init__(self, m):
        self.m = as_array(m)

    def evaluate(self, x, y):
        return np.broadcast_to(self.m, (np.size(x), 2, 2)).copy()

    def region(self, x, y):
        return np.zeros(np.size(x), np.int64)

    def potential(self, x, y, label):
        return np.stack([x, y], axis=-1) @ self.m.T

    def describe(self):
        return {"type": "constant", "value": self.m.tolist()}


class SharpInterfaceField(AnalyticField):
    """m_left for x < x0, m_right for x >= x0."""

    def __init__(self, m_left, m_right, x0=0.0):
        self.ml, self.mr, self.x0 = as_array(m_left), as_array(m_right), float(x0)

    def evaluate(self, x, y):
        out = np.empty((np.size(x), 2, 2))
        left = x < self.x0
        out[left] = self.ml
        out[~left] = self.mr
        return out

    def region(self, x, y):
        return (np.asarray(x) >= self.x0).astype(np.int64)

    def potential(self, x, y, label):
        p = np.stack([x - self.x0, y], axis=-1)
        return np.where((label == 0)[:, None], p @ self.ml.T, p @ self.mr.T)

    def hbreaks(self, y, xa, xb):
        return np.full((np.size(y), 1), self.x0)

    def describe(self):
        return {"type": "sharp", "left": self.ml.tolist(), "right": self.mr.tolist(), "x0": self.x0}


class TranslatedField(AnalyticField):
    """x -> child(x - shift)."""

    def __init__(self, child, dx, dy=0.0):
        self.child, self.dx, self.dy = child, float(dx), float(dy)

    def evaluate(self, x, y):
        return self.child.evaluate(x - self.dx, y - self.dy)

    def region(self, x, y):
        return self.child.region(x - self.dx, y - self.dy)

    def potential(self, x, y, label):
        return self.child.potential(x - self.dx, y - self.dy, label)

    def hbreaks(self, y, xa, xb):
        return self.child.hbreaks(y - self.dy, xa - self.dx, xb - self.dx) + self.dx

    def vbreaks(self, x, ya, yb):
        return self.child.vbreaks(x - self.dx, ya - self.dy, yb - self.dy) + self.dy

    def ybreaks(self, ya, yb):
        return self.child.ybreaks(ya - self.dy, yb - self.dy) + self.dy

    def describe(self):
        return {"type": "translated", "shift": [self.dx, self.dy], "child": self.child.describe()}


class PointReflectedField(AnalyticField):
    """x -> child(-x). The potential is -v(-x)."""

    def __init__(self, child):
        self.child = child

    def evaluate(self, x, y):
        return self.child.evaluate(-x, -y)

    def region(self, x, y):
        return self.child.region(-x, -y)

    def potential(self, x, y, label):
        return -self.child.potential(-x, -y, label)

    def hbreaks(self, y, xa, xb):
        return -self.child.hbreaks(-y, -xb, -xa)

    def vbreaks(self, x, ya, yb):
        return -self.child.vbreaks(-x, -yb, -ya)

    def ybreaks(self, ya, yb):
        return -self.child.ybreaks(-yb, -ya)[::-1]

    def describe(self):
        return {"type": "point_reflected", "child": self.child.describe()}


class LeftMultipliedField(AnalyticField):
    """x -> Q child(x)."""

    def __init__(self, child, q):
        self.child, self.q = child, as_array(q)

    def evaluate(self, x, y):
        return self.q @ self.child.evaluate(x, y)

    def region(self, x, y):
        return self.child.region(x, y)

    def potential(self, x, y, label):
        return self.child.potential(x, y, label) @ self.q.T

    def hbreaks(self, y, xa, xb):
        return self.child.hbreaks(y, xa, xb)

    def vbreaks(self, x, ya, yb):
        return self.child.vbreaks(x, ya, yb)

    def ybreaks(self, ya, yb):
        return self.child.ybreaks(ya, yb)

    def describe(self):
        return {"type": "left_multiplied", "q": self.q.tolist(), "child": self.child.describe()}


class GluedField(AnalyticField):
    """Children on consecutive x-intervals [edges[i], edges[i+1])."""
    SLOTS = 8

    def __init__(self, children, edges):
        if len(edges) != len(children) - 1 or len(children) > self.SLOTS:
            raise InvalidArgument("need len(children)-1 interior edges, at most 8 children")
        if np.any(np.diff(edges) <= 0):
            raise InvalidArgument("glue edges must increase")
        self.children = list(children)
        self.edges = np.asarray(edges, float)

    def _which(self, x):
        return np.searchsorted(self.edges, x, side="right")

    def evaluate(self, x, y):
        out = np.empty((np.size(x), 2, 2))
        w = self._which(x)
        for i, c in enumerate(self.children):
            m = w == i
            if m.any():
                out[m] = c.evaluate(x[m], y[m])
        return out

    def region(self, x, y):
        out = np.empty(np.size(x), np.int64)
        w = self._which(x)
        for i, c in enumerate(self.children):
            m = w == i
            if m.any():
                out[m] = c.region(x[m], y[m]) * self.SLOTS + i
        return out

    def potential(self, x, y, label):
        out = np.empty((np.size(x), 2))
        idx, sub = label % self.SLOTS, label // self.SLOTS
        for i, c in enumerate(self.children):
            m = idx == i
            if m.any():
                out[m] = c.potential(x[m], y[m], sub[m])
        return out

    def hbreaks(self, y, xa, xb):
        parts = [np.broadcast_to(self.edges, (np.size(y), len(self.edges)))]
        parts += [c.hbreaks(y, xa, xb) for c in self.children]
        return np.concatenate(parts, axis=1)

    def vbreaks(self, x, ya, yb):
        w = self._which(x)
        parts = []
        for i, c in enumerate(self.children):
            br = c.vbreaks(x, ya, yb)
            parts.append(np.where((w == i)[:, None], br, np.nan))
        return np.concatenate(parts, axis=1)

    def ybreaks(self, ya, yb):
        return np.concatenate([c.ybreaks(ya, yb) for c in self.children])

    def describe(self):
        return {"type": "glued", "edges": self.edges.tolist(),
                "children": [c.describe() for c in self.children]}


def _zigzag(k):
    return np.where(k >= 0, 2 * k, -2 * k - 1)


def _unzigzag(z):
    return np.where(z % 2 == 0, z // 2, -(z + 1) // 2)


class PeriodicField(AnalyticField):
    """Vertical periodization of the child's restriction to [-h, h)."""
    STRIDE = 4096

    def __init__(self, child, half_period):
        self.child = child
        self.h = float(half_period)

    def _k(self, y):
        return np.floor((y + self.h) / (2 * self.h)).astype(np.int64)

    def evaluate(self, x, y):
        k = self._k(y)
        return self.child.evaluate(x, y - 2 * self.h * k)

    def region(self, x, y):
        k = self._k(y)
        if np.any(np.abs(k) >= self.STRIDE // 2):
            raise InvalidArgument("too many periods for the region encoding")
        return self.child.region(x, y - 2 * self.h * k) * self.STRIDE + _zigzag(k)

    def potential(self, x, y, label):
        k = _unzigzag(label % self.STRIDE)
        return self.child.potential(x, y - 2 * self.h * k, label // self.STRIDE)

    def hbreaks(self, y, xa, xb):
        k = self._k(y)
        return self.child.hbreaks(y - 2 * self.h * k, xa, xb)

    def vbreaks(self, x, ya, yb):
        n = np.size(x)
        ya = np.broadcast_to(ya, (n,)).astype(float)
        yb = np.broadcast_to(yb, (n,)).astype(float)
        k0 = self._k(np.minimum(ya, yb))
        k1 = self._k(np.maximum(ya, yb))
        span = int((k1 - k0).max()) if n else 0
        parts = []
        for off in range(span + 1):
            kk = k0 + off
            live = kk <= k1
            sh = 2 * self.h * kk
            br = self.child.vbreaks(x, ya - sh, yb - sh) + sh[:, None]
            parts.append(np.where(live[:, None], br, np.nan))
            parts.append(np.where(live, sh + self.h, np.nan)[:, None])
        return np.concatenate(parts, axis=1) if parts else np.empty((n, 0))

    def ybreaks(self, ya, yb):
        out = []
        for k in range(int(self._k(np.array(ya))), int(self._k(np.array(yb))) + 1):
            sh = 2 * self.h * k
            lo, hi = max(ya, sh - self.h), min(yb, sh + self.h)
            out.append(self.child.ybreaks(lo - sh, hi - sh) + sh)
            out.append([sh - self.h, sh + self.h])
        return np.concatenate(out) if out else np.empty(0)

    def describe(self):
        return {"type": "periodic", "half_period": self.h, "child": self.child.describe()}


class FrameRotatedField(AnalyticField):
    """z -> A_c(R^{-1}(z - p)) R^{-1}: the child drawn in a rotated frame.

    Only point evaluation is supported."""

    def __init__(self, child, angle, origin=(0.0, 0.0)):
        self.child, self.angle = child, float(angle)
        self.origin = np.asarray(origin, float)
        self.rinv = rot(-self.angle)

    def local(self, x, y):
        z = np.stack([x - self.origin[0], y - self.origin[1]], axis=-1) @ self.rinv.T
        return z[..., 0], z[..., 1]

    def evaluate(self, x, y):
        u, v = self.local(x, y)
        return self.child.evaluate(u, v) @ self.rinv

    def region(self, x, y):
        u, v = self.local(x, y)
        return self.child.region(u, v)

    def potential(self, x, y, label):
        u, v = self.local(x, y)
        return self.child.potential(u, v, label)


# ---------------------------------------------------------------- line integrals

def _pieces(breaks, a, b):
    n = breaks.shape[0]
    ends = np.concatenate([a[:, None], b[:, None], breaks], axis=1)
    ends = np.clip(np.where(np.isfinite(ends), ends, a[:, None]), a[:, None], b[:, None])
    ends.sort(axis=1)
    return ends[:, :-1], ends[:, 1:], n


def segment_integrals(field, p0, p1):
    """Exact ∫ A dγ along axis-aligned segments p0 -> p1 (arrays (n, 2))."""
    p0 = np.atleast_2d(np.asarray(p0, float))
    p1 = np.atleast_2d(np.asarray(p1, float))
    out = np.zeros((len(p0), 2))
    horiz = p0[:, 1] == p1[:, 1]
    vert = (p0[:, 0] == p1[:, 0]) & ~horiz
    if np.any(~(horiz | vert)):
        raise InvalidArgument("segments must be axis-aligned")
    for mask, ax in ((horiz, 0), (vert, 1)):
        if not mask.any():
            continue
        s, e = p0[mask], p1[mask]
        c = s[:, 1 - ax]
        a = np.minimum(s[:, ax], e[:, ax])
        b = np.maximum(s[:, ax], e[:, ax])
        sign = np.where(e[:, ax] >= s[:, ax], 1.0, -1.0)
        br = field.hbreaks(c, a, b) if ax == 0 else field.vbreaks(c, a, b)
        lo, hi, n = _pieces(np.asarray(br, float).reshape(len(c), -1), a, b)
        k = lo.shape[1]
        cc = np.repeat(c, k)
        lo_f, hi_f = lo.ravel(), hi.ravel()
        live = hi_f > lo_f
        mid = 0.5 * (lo_f + hi_f)
        tot = np.zeros((lo_f.size, 2))
        if live.any():
            m, cl = mid[live], cc[live]
            if ax == 0:
                lab = field.region(m, cl)
                d = field.potential(hi_f[live], cl, lab) - field.potential(lo_f[live], cl, lab)
            else:
                lab = field.region(cl, m)
                d = field.potential(cl, hi_f[live], lab) - field.potential(cl, lo_f[live], lab)
            tot[live] = d
        out[mask] = tot.reshape(n, k, 2).sum(axis=1) * sign[:, None]
    return out


# ---------------------------------------------------------------- grid fields

class GridField:
    """Cell-centered samples; values[j, i] belongs to the cell with center
    (x_min + (i + 1/2) h, y_min + (j + 1/2) h)."""
    kind = "grid"

    def __init__(self, domain, values):
        if domain.h is None:
            raise InvalidArgument("grid fields need a spacing")
        values = np.asarray(values, float)
        if values.shape != (domain.ny, domain.nx, 2, 2):
            raise InvalidArgument(f"sample array {values.shape} does not match "
                                  f"{domain.ny}x{domain.nx} cells")
        self.domain = domain
        self.values = values

    @property
    def h(self):
        return self.domain.h

    def centers(self):
        xs, ys = self.domain.centers()
        return np.meshgrid(xs, ys)

    def copy(self):
        return GridField(self.domain, self.values.copy())

    def window_mask(self, window):
        if not self.domain.contains(window):
            raise DomainMismatchError("window is not covered by the field's domain")
        X, Y = self.centers()
        return (X >= window.x_min) & (X <= window.x_max) & (Y >= window.y_min) & (Y <= window.y_max)

    def cell_index(self, x, y):
        i = np.floor((np.asarray(x) - self.domain.x_min) / self.h).astype(int)
        j = np.floor((np.asarray(y) - self.domain.y_min) / self.h).astype(int)
        return j, i


def constant_grid(domain, m):
    return GridField(domain, np.broadcast_to(as_array(m), (domain.ny, domain.nx, 2, 2)).copy())


def rasterize(field, domain, mode="center"):
    """Sample an analytic field on the cell grid of domain.

    mode="center" takes the value at each cell center, nudged by
    1e-9*h/2*(1, 1) so centers on a region boundary fall on a fixed side.
    mode="segment" stores, per column of the matrix, the average of A e_k
    along the cell's mid-line of length 2h in direction e_k; the central
    discrete curl of such a grid then equals the exact circulation around
    2h-squares, which keeps rasterized constructions admissible.
    """
    if domain.h is None:
        raise InvalidArgument("rasterize needs a grid spacing")
    h = domain.h
    xs, ys = domain.centers()
    X, Y = np.meshgrid(xs, ys)
    if mode == "center":
        nudge = 1e-9 * h / 2
        vals = field.evaluate((X + nudge).ravel(), (Y + nudge).ravel())
    elif mode == "segment":
        x, y = X.ravel(), Y.ravel()
        cx = segment_integrals(field, np.c_[x - h, y], np.c_[x + h, y]) / (2 * h)
        cy = segment_integrals(field, np.c_[x, y - h], np.c_[x, y + h]) / (2 * h)
        vals = np.stack([cx, cy], axis=-1)
    else:
        raise InvalidArgument(f"unknown rasterize mode {mode!r}")
    vals = np.asarray(vals, float).reshape(domain.ny, domain.nx, 2, 2)
    bad = ~np.isfinite(vals).all(axis=(2, 3))
    if bad.any():
        j, i = map(int, np.argwhere(bad)[0])
        raise DegenerateSampleError(
            f"non-finite sample at cell (row {j}, col {i}), center ({xs[i]:.6g}, {ys[j]:.6g})",
            cell=(j, i))
    return GridField(domain, vals)


_MAGIC = b"GFGRID01"


def write_grid(path, field, fmt=None):
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "bin")
    d = field.domain
    if fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<5d2q", d.x_min, d.x_max, d.y_min, d.y_max, d.h, d.nx, d.ny))
            fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    else:
        buf = io.StringIO()
        buf.write("x_min,x_max,y_min,y_max,h,n_x,n_y\n")
        buf.write(",".join(repr(float(v)) for v in (d.x_min, d.x_max, d.y_min, d.y_max, d.h)))
        buf.write(f",{d.nx},{d.ny}\n")
        buf.write("a11,a12,a21,a22\n")
        for row in field.values.reshape(-1, 4):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        with open(path, "w", newline="\n") as fh:
            fh.write(buf.getvalue())


def read_grid(path):
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head == _MAGIC:
            x0, x1, y0, y1, h, nx, ny = struct.unpack("<5d2q", fh.read(56))
            vals = np.frombuffer(fh.read(), dtype="<f8").reshape(ny, nx, 2, 2).copy()
            return GridField(Domain(x0, x1, y0, y1, h), vals)
    with open(path) as fh:
        lines = fh.read().splitlines()
    hdr = lines[1].split(",")
    x0, x1, y0, y1, h = map(float, hdr[:5])
    nx, ny = int(hdr[5]), int(hdr[6])
    vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[3:] if ln])
    return GridField(Domain(x0, x1, y0, y1, h), vals.reshape(ny, nx, 2, 2))
