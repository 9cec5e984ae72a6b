"""Lattice discretizations of boxes, cracked cubes and convex polygons.

A :class:`GridDomain` is a rectangular block of lattice nodes with spacing
``h``.  Nodes flagged ``active`` carry the unknowns; every other node of the
box, and every lattice node outside the box, is held at zero.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

TOL_GEOM = 1e-9


class ConfigurationError(ValueError):
    """Raised when a domain cannot be represented on the requested lattice."""


def _as_int_ratio(x: float, h: float, what: str) -> int:
    r = x / h
    n = round(r)
    if abs(r - n) > 1e-9 * max(1.0, abs(r)):
        raise ConfigurationError(f"{what}={x!r} is not an integer multiple of h={h!r}")
    return int(n)


@dataclass(frozen=True, eq=False)
class GridDomain:
    dim: int
    h: float
    lower: tuple[float, ...]
    active: np.ndarray = field(repr=False)
    name: str = ""

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError("only dim 1 and 2 are supported")
        if not self.h > 0:
            raise ConfigurationError("spacing h must be positive")
        act = np.asarray(self.active, dtype=bool)
        if act.ndim != self.dim or len(self.lower) != self.dim:
            raise ConfigurationError("mask/lower do not match dim")
        act.setflags(write=False)
        object.__setattr__(self, "active", act)
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.active.shape

    @property
    def constrained(self) -> np.ndarray:
        return ~self.active

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(lo + (n - 1) * self.h for lo, n in zip(self.lower, self.shape))

    @property
    def box(self) -> tuple[tuple[float, float], ...]:
        return tuple(zip(self.lower, self.upper))

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def axes(self) -> list[np.ndarray]:
        return [lo + self.h * np.arange(n) for lo, n in zip(self.lower, self.shape)]

    def coordinates(self) -> np.ndarray:
        """Physical coordinates of all box nodes, shape ``shape + (dim,)``."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def active_indices(self) -> np.ndarray:
        """Integer lattice indices of the active nodes, shape ``(M, dim)``."""
        return np.argwhere(self.active)

    def active_coordinates(self) -> np.ndarray:
        idx = self.active_indices()
        return np.asarray(self.lower) + self.h * idx

    def node_index(self, point) -> tuple[int, ...]:
        """Lattice index of a physical point; it must sit on a box node."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        idx = []
        for x, lo, n in zip(point, self.lower, self.shape):
            k = _as_int_ratio(x - lo, self.h, "coordinate offset")
            if not 0 <= k < n:
                raise ConfigurationError(f"point {tuple(point)} lies outside the box")
            idx.append(k)
        return tuple(idx)

    def dilate(self, factor: float) -> "GridDomain":
        """Same node masks on the lattice scaled by ``factor`` about the origin."""
        return GridDomain(self.dim, self.h * factor, tuple(factor * v for v in self.lower),
                          self.active.copy(), name=f"{self.name}*{factor:g}" if self.name else "")

    def with_constraints(self, extra: np.ndarray) -> "GridDomain":
        """Copy with the nodes of ``extra`` additionally held at zero."""
        return GridDomain(self.dim, self.h, self.lower, self.active & ~np.asarray(extra, bool),
                          name=self.name)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "h": self.h,
                "box": [list(b) for b in self.box], "n_active": self.n_active}

    def to_json(self) -> str:
        return json.dumps(domain_to_dict(self))


def make_box(dim: int, side_length: float, h: float, lower=None) -> GridDomain:
    """Box ``[lower, lower + side]^dim`` with homogeneous Dirichlet boundary nodes.

    ``lower`` defaults to the origin.
    """
    if side_length <= 0 or h <= 0:
        raise ConfigurationError("side_length and h must be positive")
    n = _as_int_ratio(side_length, h, "side_length")
    if lower is None:
        lower = (0.0,) * dim
    elif np.isscalar(lower):
        lower = (float(lower),) * dim
    active = np.zeros((n + 1,) * dim, dtype=bool)
    active[(slice(1, n),) * dim] = True
    return GridDomain(dim, h, tuple(lower), active, name=f"box{dim}d")


def crack_mask(domain: GridDomain, centers, half_width: float = 0.25) -> np.ndarray:
    """Mask of the lattice nodes on the cracks ``[-a,a]^{N-1} x {0} + z``."""
    mask = np.zeros(domain.shape, dtype=bool)
    coords = domain.coordinates()
    tol = 1e-9 * domain.h
    for z in centers:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        rel = coords - z
        on = np.abs(rel[..., -1]) <= tol
        for k in range(domain.dim - 1):
            on &= np.abs(rel[..., k]) <= half_width + tol
        mask |= on
    return mask


def make_cracked_domain(dim: int, n: int, h: float) -> GridDomain:
    """Box ``[-n-1/2, n+1/2]^dim`` minus the cracks ``F + z``, ``|z|_inf <= n``.

    For ``dim == 1`` each crack is the single point ``z``; for ``dim == 2`` it is the
    segment ``[-1/4, 1/4] x {0}`` translated by ``z``.
    """
    if n < 0:
        raise ConfigurationError("n must be nonnegative")
    m = _as_int_ratio(1.0, h, "1")
    if m % 2:
        raise ConfigurationError("1/(2h) must be an integer so that cell faces are lattice nodes")
    if dim == 2 and m % 4:
        raise ConfigurationError("crack end points +-1/4 are not lattice nodes for this h")
    half = n + 0.5
    dom = make_box(dim, 2 * half, h, lower=-half)
    centers = list(itertools.product(range(-n, n + 1), repeat=dim))
    cracks = crack_mask(dom, centers)
    out = dom.with_constraints(cracks)
    return GridDomain(dim, h, dom.lower, out.active, name=f"cracked{dim}d_n{n}")


# ---------------------------------------------------------------------------
# convex polygons


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ConfigurationError("a polygon needs at least three 2D vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 < 0:
            v = v[::-1].copy()
            area2 = -area2
        scale = np.ptp(v, axis=0).max()
        if area2 <= TOL_GEOM * scale**2:
            raise ConfigurationError("degenerate polygon")
        edges = np.roll(v, -1, axis=0) - v
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross < -TOL_GEOM * scale**2):
            raise ConfigurationError("polygon is not convex")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def hull(cls, points) -> "ConvexPolygon":
        pts = np.asarray(points, dtype=float)
        hull = ConvexHull(pts)
        return cls(pts[hull.vertices])

    @classmethod
    def regular(cls, n: int, radius: float = 1.0, center=(0.0, 0.0)) -> "ConvexPolygon":
        a = 2 * np.pi * np.arange(n) / n
        return cls(np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)]))

    @classmethod
    def rectangle(cls, width: float, height: float, lower=(0.0, 0.0)) -> "ConvexPolygon":
        x0, y0 = lower
        return cls([[x0, y0], [x0 + width, y0], [x0 + width, y0 + height], [x0, y0 + height]])

    def halfplanes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit outward normals ``a`` and offsets ``b`` with ``a @ x <= b`` inside."""
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        normals = np.column_stack([e[:, 1], -e[:, 0]])
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        return normals, np.einsum("ij,ij->i", normals, v)

    def signed_distance(self, points) -> np.ndarray:
        """Distance to the boundary for interior points, negative outside (approx.)."""
        a, b = self.halfplanes()
        pts = np.atleast_2d(points)
        return np.min(b[None, :] - pts @ a.T, axis=1)

    def boundary_distance(self, points) -> np.ndarray:
        """Euclidean distance from each point to the polygon boundary."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        d = w - v
        rel = pts[:, None, :] - v[None, :, :]
        lam = np.clip(np.einsum("mkj,kj->mk", rel, d) / np.einsum("kj,kj->k", d, d), 0.0, 1.0)
        proj = v[None] + lam[..., None] * d[None]
        return np.min(np.linalg.norm(pts[:, None, :] - proj, axis=2), axis=1)

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)))

    @property
    def inradius(self) -> float:
        return inradius_incenter(self)[0]

    @property
    def incenter(self) -> np.ndarray:
        return inradius_incenter(self)[1]

    @property
    def eccentricity(self) -> float:
        return eccentricity(self)

    def scaled(self, t: float, center) -> "ConvexPolygon":
        c = np.asarray(center, dtype=float)
        return ConvexPolygon(c + t * (self.vertices - c))


def inradius_incenter(polygon: ConvexPolygon) -> tuple[float, np.ndarray]:
    """Chebyshev radius and center, from the LP ``max r : a_k.x + r <= b_k``."""
    if not isinstance(polygon, ConvexPolygon):
        polygon = ConvexPolygon(polygon)
    a, b = polygon.halfplanes()
    a_ub = np.column_stack([a, np.ones(len(b))])
    res = linprog(c=[0.0, 0.0, -1.0], A_ub=a_ub, b_ub=b,
                  bounds=[(None, None), (None, None), (0, None)], method="highs")
    if not res.success or res.x[2] <= 0:
        raise ConfigurationError("inradius LP failed: degenerate polygon")
    return float(res.x[2]), np.asarray(res.x[:2])


def eccentricity(polygon: ConvexPolygon) -> float:
    """``diam / (2 R)``; equals 1 for a disk and sqrt(2) for any square."""
    r, _ = inradius_incenter(polygon)
    return polygon.diameter / (2.0 * r)


def cone_eccentricity(beta: float) -> float:
    """Eccentricity of a rotationally symmetric cone of aperture ``beta`` cut by ``B_1``."""
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    c = math.sqrt(1.0 - beta * beta)
    return 0.5 * max(2.0 * c, 1.0) * (1.0 + 1.0 / c)


@dataclass
class MarginReport:
    t: float
    inradius: float
    min_distance: float
    bound: float

    @property
    def margin(self) -> float:
        return self.min_distance - self.bound

    @property
    def ok(self) -> bool:
        return self.margin >= -TOL_GEOM


def scaled_distance_check(polygon: ConvexPolygon, t: float, n_samples: int = 200) -> MarginReport:
    """Distance from ``x0 + t (P - x0)`` to ``dP`` against ``(1 - t) R``.

    ``x0`` is the incenter.  The shrunken boundary is sampled uniformly per edge and
    always includes the vertices, where the concave distance function attains its
    minimum, so the sampled minimum is exact.
    """
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie in (0, 1)")
    r, x0 = inradius_incenter(polygon)
    small = polygon.scaled(t, x0).vertices
    nxt = np.roll(small, -1, axis=0)
    per_edge = max(1, n_samples // len(small))
    lam = np.arange(per_edge) / per_edge
    pts = (small[:, None, :] + lam[None, :, None] * (nxt - small)[:, None, :]).reshape(-1, 2)
    dist = polygon.boundary_distance(pts)
    return MarginReport(t=t, inradius=r, min_distance=float(dist.min()), bound=(1.0 - t) * r)


def random_convex_polygon(rng: np.random.Generator, n_vertices: int = 7, radius: float = 1.0) -> ConvexPolygon:
    """Polygon through ``n_vertices`` sorted random angles on a jittered circle."""
    while True:
        ang = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
        rad = radius * rng.uniform(0.6, 1.0, n_vertices)
        pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        try:
            return ConvexPolygon.hull(pts)
        except ConfigurationError:
            continue


def make_polygon_domain(polygon: ConvexPolygon, h: float) -> GridDomain:
    """Lattice nodes strictly inside ``polygon`` are active; the box is the snapped bounding box."""
    v = polygon.vertices
    lo = np.floor(v.min(axis=0) / h) * h - h
    hi = np.ceil(v.max(axis=0) / h) * h + h
    shape = tuple(int(round((b - a) / h)) + 1 for a, b in zip(lo, hi))
    axes = [a + h * np.arange(n) for a, n in zip(lo, shape)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    inside = polygon.signed_distance(pts) > TOL_GEOM * max(1.0, h)
    return GridDomain(2, h, tuple(lo), inside.reshape(shape), name="polygon")


# ---------------------------------------------------------------------------
# JSON documents: {dim, h, box, crack_list | polygon_vertices}


def domain_to_dict(domain: GridDomain) -> dict:
    boundary = np.ones(domain.shape, bool)
    boundary[tuple(slice(1, n - 1) for n in domain.shape)] = False
    inner_constrained = np.argwhere(domain.constrained & ~boundary)
    return {
        "dim": domain.dim,
        "h": domain.h,
        "box": [list(b) for b in domain.box],
        "crack_list": [list(map(float, np.asarray(domain.lower) + domain.h * i)) for i in inner_constrained],
        "name": domain.name,
    }


def domain_from_dict(doc: dict) -> GridDomain:
    """Build a domain from a JSON document.

    Accepted forms: ``{"dim", "h", "box": [[lo, hi], ...], "crack_list": [...]}``
    where cracks are node coordinates or ``{"center": z, "half_width": a}``
    segments, ``{"polygon_vertices": [...], "h"}``, or the shorthand kinds
    ``{"kind": "box" | "cracked" | "polygon", ...}``.
    """
    kind = doc.get("kind")
    h = float(doc["h"])
    if kind == "box":
        return make_box(int(doc.get("dim", 1)), float(doc.get("side", 1.0)), h, lower=doc.get("lower"))
    if kind == "cracked":
        return make_cracked_domain(int(doc.get("dim", 1)), int(doc["n"]), h)
    if kind == "polygon" or "polygon_vertices" in doc:
        return make_polygon_domain(ConvexPolygon(doc.get("polygon_vertices") or doc["vertices"]), h)
    dim = int(doc["dim"])
    box = doc["box"]
    lower = [float(b[0]) for b in box]
    sides = [float(b[1]) - float(b[0]) for b in box]
    shape = tuple(_as_int_ratio(s, h, "box side") + 1 for s in sides)
    active = np.zeros(shape, bool)
    active[tuple(slice(1, n - 1) for n in shape)] = True
    dom = GridDomain(dim, h, tuple(lower), active, name=doc.get("name", ""))
    extra = np.zeros(shape, bool)
    seg = []
    for c in doc.get("crack_list", []):
        if isinstance(c, dict):
            seg.append(c)
        else:
            extra[dom.node_index(c)] = True
    for c in seg:
        extra |= crack_mask(dom, [c["center"]], float(c.get("half_width", 0.25)))
    return dom.with_constraints(extra)
