"""Discrete differential geometry of immersed plane curves.

Curves live in R^2, identified with the complex plane.  The complex
structure J is rotation by +pi/2, so J(x, y) = (-y, x), and the unit
normal of a curve is N = J T where T is the unit tangent.  With this
orientation a counterclockwise circle has positive curvature and
inward-pointing normal, and kappa = d(theta)/ds where theta is the
tangent direction angle.

Quantities carried per curve:

* theta   -- continuous lift of the tangent angle (the phase of dz
             restricted to the curve),
* beta    -- primitive of the form <Jx, T> ds (the restriction of
             x dy - y dx), cumulative from the first vertex,
* kappa   -- signed curvature, equal to d(theta)/ds up to O(h^2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline


class CurveError(ValueError):
    """Raised when a polyline violates a curve invariant."""


def rot90(v):
    """Apply J (rotation by +pi/2) to vectors of shape (..., 2)."""
    v = np.asarray(v, dtype=float)
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise CurveError("zero-length vector cannot be normalized")
    return v / n


@dataclass(frozen=True)
class AsymptoticRay:
    """Ray from the origin marking the asymptote of an open arc end.

    Beyond ``reach`` past the last vertex the curve is identified with
    the exact ray for the purposes of unbounded integrals.
    """

    angle: float
    reach: float = 1.0

    def __post_init__(self):
        if not self.reach > 0.0:
            raise CurveError("ray reach must be positive")
        object.__setattr__(self, "angle", float(self.angle) % (2.0 * np.pi))

    @property
    def direction(self):
        return np.array([np.cos(self.angle), np.sin(self.angle)])


@dataclass(frozen=True)
class PolyCurve:
    """Immersed plane curve sampled as an ordered polyline.

    ``topology`` is ``"loop"`` (implicitly closed, first vertex not
    repeated) or ``"arc"`` (open, with two asymptotic rays).  ``h`` is
    the target edge length; edges must stay within [h/4, 4h].
    """

    vertices: np.ndarray
    topology: str = "loop"
    h: float = 0.0
    rays: tuple = ()

    MIN_VERTICES = 16

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        if v.ndim != 2 or v.shape[1] != 2:
            raise CurveError("vertices must have shape (n, 2)")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        h = float(self.h) if self.h else float(np.median(self._edge_lengths_raw(v)))
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "rays", tuple(self.rays))

    @staticmethod
    def _edge_lengths_raw(v):
        d = np.diff(v, axis=0)
        return np.linalg.norm(d, axis=1)

    # -- basic structure ------------------------------------------------

    @property
    def is_loop(self):
        return self.topology == "loop"

    @property
    def n(self):
        return self.vertices.shape[0]

    def validate(self):
        """Check the polyline invariants, raising CurveError on failure."""
        if self.topology not in ("loop", "arc"):
            raise CurveError(f"unknown topology {self.topology!r}")
        if self.n < self.MIN_VERTICES:
            raise CurveError(f"need >= {self.MIN_VERTICES} vertices, got {self.n}")
        e = self.edge_lengths
        if np.any(e == 0.0):
            raise CurveError("consecutive vertices must be distinct")
        if e.min() < self.h / 4.0 or e.max() > 4.0 * self.h:
            raise CurveError(
                f"edge lengths [{e.min():.3g}, {e.max():.3g}] leave "
                f"[h/4, 4h] = [{self.h / 4:.3g}, {4 * self.h:.3g}]"
            )
        if self.is_loop and self.rays:
            raise CurveError("closed loops carry no asymptotic rays")
        if not self.is_loop and len(self.rays) != 2:
            raise CurveError("open arcs need exactly two asymptotic rays")
        return self

    # -- cached geometry -------------------------------------------------

    @cached_property
    def edge_vectors(self):
        v = self.vertices
        if self.is_loop:
            return np.roll(v, -1, axis=0) - v
        return np.diff(v, axis=0)

    @cached_property
    def edge_lengths(self):
        return np.linalg.norm(self.edge_vectors, axis=1)

    @cached_property
    def length(self):
        return float(self.edge_lengths.sum())

    @cached_property
    def arclength(self):
        """Cumulative arc length at the vertices, starting at 0."""
        s = np.zeros(self.n)
        if self.is_loop:
            s[1:] = np.cumsum(self.edge_lengths[:-1])
        else:
            s[1:] = np.cumsum(self.edge_lengths)
        return s

    @cached_property
    def tangents(self):
        """Unit tangents at the vertices (central differences)."""
        v = self.vertices
        if self.is_loop:
            return unit(np.roll(v, -1, axis=0) - np.roll(v, 1, axis=0))
        t = np.empty_like(v)
        t[1:-1] = v[2:] - v[:-2]
        t[0] = v[1] - v[0]
        t[-1] = v[-1] - v[-2]
        return unit(t)

    @cached_property
    def normals(self):
        return rot90(self.tangents)

    def neighbor_spacing(self):
        """Arc distances (d_prev, d_next) per vertex for FD stencils."""
        e = self.edge_lengths
        if self.is_loop:
            return np.roll(e, 1), e
        d_prev = np.empty(self.n)
        d_next = np.empty(self.n)
        d_prev[1:] = e
        d_next[:-1] = e
        d_prev[0] = e[0]
        d_next[-1] = e[-1]
        return d_prev, d_next

    # -- transforms -------------------------------------------------------

    def scaled(self, factor):
        """Dilation about the origin; rays are scale invariant."""
        if factor <= 0.0:
            raise CurveError("scale factor must be positive")
        rays = tuple(AsymptoticRay(r.angle, r.reach * factor) for r in self.rays)
        return PolyCurve(self.vertices * factor, self.topology, self.h * factor, rays)

    def rolled(self, shift):
        """Reindex a loop so vertex ``shift`` becomes vertex 0."""
        if not self.is_loop:
            raise CurveError("only loops can be rolled")
        return replace(self, vertices=np.roll(self.vertices, -shift, axis=0))

    def ball_mask(self, center, radius):
        d = np.linalg.norm(self.vertices - np.asarray(center, float), axis=1)
        return d <= radius


# -- constructors ---------------------------------------------------------


def circle(radius=1.0, h=0.05, center=(0.0, 0.0)):
    n = max(PolyCurve.MIN_VERTICES, int(round(2.0 * np.pi * radius / h)))
    phi = 2.0 * np.pi * np.arange(n) / n
    v = np.stack([np.cos(phi), np.sin(phi)], axis=1) * radius + np.asarray(center, float)
    return PolyCurve(v, "loop", h=2.0 * np.pi * radius / n)


def line_arc(angle=0.0, h=0.05, half_length=6.0, offset=(0.0, 0.0)):
    """Straight open arc through ``offset`` with direction ``angle``."""
    n = max(PolyCurve.MIN_VERTICES, int(round(2.0 * half_length / h)) + 1)
    t = np.linspace(-half_length, half_length, n)
    d = np.array([np.cos(angle), np.sin(angle)])
    v = np.asarray(offset, float) + t[:, None] * d[None, :]
    rays = (AsymptoticRay((angle + np.pi) % (2 * np.pi)), AsymptoticRay(angle))
    return PolyCurve(v, "arc", h=2.0 * half_length / (n - 1), rays=rays)


# -- resampling -----------------------------------------------------------


def _spline(curve):
    v = curve.vertices
    if curve.is_loop:
        s = np.append(curve.arclength, curve.length)
        pts = np.vstack([v, v[:1]])
        return CubicSpline(s, pts, bc_type="periodic"), curve.length
    return CubicSpline(curve.arclength, v, bc_type="natural"), curve.length


def resample(curve, h=None, n=None):
    """Redistribute vertices at near-uniform arc length spacing.

    A cubic spline through the current vertices supplies the shape, so
    repeated resampling loses O(h^4) per pass instead of corner-cutting.
    """
    if h is None and n is None:
        h = curve.h
    L = curve.length
    if n is None:
        if curve.is_loop:
            n = int(round(L / h))
        else:
            n = int(round(L / h)) + 1
    if n < PolyCurve.MIN_VERTICES:
        raise CurveError(
            f"curve of length {L:.3g} too short for >=16 vertices at h={h:.3g}"
        )
    spl, L = _spline(curve)
    if curve.is_loop:
        s_new = L * np.arange(n) / n
        h_eff = L / n
    else:
        s_new = np.linspace(0.0, L, n)
        h_eff = L / (n - 1)
    return PolyCurve(spl(s_new), curve.topology, h=h_eff, rays=curve.rays)


# -- angle, primitive, curvature -------------------------------------------


def lift_angles(raw, start_branch=None):
    """Continuous lift of a sequence of angles; consecutive jumps < pi."""
    raw = np.asarray(raw, dtype=float)
    d = np.diff(raw)
    d = (d + np.pi) % (2.0 * np.pi) - np.pi
    lifted = np.concatenate([[raw[0]], raw[0] + np.cumsum(d)])
    if start_branch is not None:
        lifted += 2.0 * np.pi * np.round((start_branch - lifted[0]) / (2.0 * np.pi))
    else:
        # canonical branch: theta[0] in (-pi, pi]
        lifted -= 2.0 * np.pi * np.ceil((lifted[0] - np.pi) / (2.0 * np.pi))
    return lifted


def lagrangian_angle(curve, start_branch=None):
    """Per-vertex continuous lift of the tangent direction angle."""
    t = curve.tangents
    return lift_angles(np.arctan2(t[:, 1], t[:, 0]), start_branch)


def turning_number(curve):
    """Integer winding of the tangent around a closed loop."""
    if not curve.is_loop:
        raise CurveError("turning number is defined for loops")
    theta = lagrangian_angle(curve)
    t = curve.tangents
    closing = np.arctan2(t[0, 1], t[0, 0])
    d = (closing - theta[-1] + np.pi) % (2.0 * np.pi) - np.pi
    total = theta[-1] + d - theta[0]
    return int(round(total / (2.0 * np.pi)))


def liouville_primitive(curve):
    """Cumulative primitive of <Jx, T> ds and the loop holonomy.

    The form x dy - y dx integrates exactly over a straight edge to the
    cross product p_i x p_{i+1}, so the per-edge increments are exact
    on the polyline and the loop holonomy equals twice the signed
    enclosed (shoelace) area to rounding.  Returns ``(beta,
    beta_period)`` with beta[0] = 0; for open arcs the period is 0 by
    convention.
    """
    v = curve.vertices
    nxt = np.roll(v, -1, axis=0) if curve.is_loop else v[1:]
    cur = v if curve.is_loop else v[:-1]
    incr = cur[:, 0] * nxt[:, 1] - cur[:, 1] * nxt[:, 0]
    beta = np.zeros(curve.n)
    if curve.is_loop:
        beta[1:] = np.cumsum(incr[:-1])
        return beta, float(incr.sum())
    beta[1:] = np.cumsum(incr)
    return beta, 0.0


def curvature(curve):
    """Signed curvature and mean-curvature vector at the vertices.

    Uses arc-length weighted central stencils (one-sided at open-arc
    endpoints); kappa agrees with d(theta)/ds to O(h^2) on smooth
    near-uniform polylines.  The vector is kappa * N with N = J T.
    """
    if np.any(curve.edge_lengths == 0.0):
        raise CurveError("degenerate stencil: repeated points")
    v = curve.vertices
    n = curve.n
    if curve.is_loop:
        p_prev = np.roll(v, 1, axis=0)
        p_next = np.roll(v, -1, axis=0)
    else:
        p_prev = np.empty_like(v)
        p_next = np.empty_like(v)
        p_prev[1:] = v[:-1]
        p_next[:-1] = v[1:]
        # one-sided: reflect the stencil at the ends
        p_prev[0] = v[0]
        p_next[-1] = v[-1]
    d1 = np.linalg.norm(v - p_prev, axis=1)
    d2 = np.linalg.norm(p_next - v, axis=1)
    if np.any((d1 + d2) == 0.0):
        raise CurveError("degenerate stencil: repeated points")
    interior = (d1 > 0) & (d2 > 0)
    acc = np.zeros_like(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.where(d2[:, None] > 0, (p_next - v) / d2[:, None], 0.0)
        bwd = np.where(d1[:, None] > 0, (v - p_prev) / d1[:, None], 0.0)
    acc[interior] = (
        2.0 * (fwd[interior] - bwd[interior]) / (d1 + d2)[interior, None]
    )
    kappa = np.einsum("ij,ij->i", acc, curve.normals)
    if not curve.is_loop and n >= 3:
        # one-sided endpoint values: copy the adjacent interior stencil
        kappa[0] = kappa[1]
        kappa[-1] = kappa[-2]
    h_vec = kappa[:, None] * curve.normals
    return kappa, h_vec


@dataclass(frozen=True)
class LagrangianFields:
    """Per-vertex angle lift, Liouville primitive, curvature, arc length."""

    theta: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    arclen: np.ndarray
    beta_period: float
    theta_period: float = 0.0

    EXACT_TOL = 1e-8

    @property
    def zero_maslov(self):
        return abs(self.theta_period) < 1e-9

    @property
    def exact(self):
        return abs(self.beta_period) <= self.EXACT_TOL


def compute_fields(curve, theta_branch=None):
    theta = lagrangian_angle(curve, start_branch=theta_branch)
    beta, period = liouville_primitive(curve)
    kappa, _ = curvature(curve)
    theta_period = 0.0
    if curve.is_loop:
        theta_period = 2.0 * np.pi * turning_number(curve)
    return LagrangianFields(theta, beta, kappa, curve.arclength, period, theta_period)


# -- quadrature -------------------------------------------------------------


def curve_integral(curve, f, order=6, ray_tail=None, return_parts=False):
    """Line integral of f over the curve by per-segment Gauss-Legendre.

    ``f`` is either a callable mapping an (m, 2) array of points to m
    values, or an array of per-vertex samples (interpolated linearly
    within segments).  For open arcs a ``ray_tail(point, direction)``
    callable supplies the analytic integral from each endpoint to
    infinity along its asymptotic ray; Gaussian kernels have one in
    closed form.  Requesting tails without providing one is an error.
    """
    nodes, weights = leggauss(order)
    nodes = 0.5 * (nodes + 1.0)  # map to [0, 1]
    weights = 0.5 * weights
    a = curve.vertices
    b = np.roll(a, -1, axis=0) if curve.is_loop else a[1:]
    a = a if curve.is_loop else a[:-1]
    e = curve.edge_lengths
    pts = a[:, None, :] + nodes[None, :, None] * (b - a)[:, None, :]
    if callable(f):
        vals = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    else:
        f = np.asarray(f, dtype=float)
        if f.shape[0] != curve.n:
            raise CurveError("per-vertex samples must match vertex count")
        fb = np.roll(f, -1) if curve.is_loop else f[1:]
        fa = f if curve.is_loop else f[:-1]
        vals = fa[:, None] + nodes[None, :] * (fb - fa)[:, None]
    finite = float(np.einsum("ij,j,i->", vals, weights, e))
    tail = 0.0
    if not curve.is_loop:
        if ray_tail is not None:
            if not callable(ray_tail):
                raise CurveError("ray_tail must be callable")
            d_start = curve.rays[0].direction
            d_end = curve.rays[1].direction
            tail = float(ray_tail(curve.vertices[0], d_start))
            tail += float(ray_tail(curve.vertices[-1], d_end))
    if return_parts:
        return finite, tail
    return finite + tail


# -- distances and embeddedness ---------------------------------------------


def _point_segment_dist(points, a, b):
    """Distances from each point to the nearest of the segments (a, b)."""
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ap = points[:, None, :] - a[None, :, :]
    t = np.einsum("pij,ij->pi", ap, ab) / np.maximum(ab2, 1e-300)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - proj, axis=2)
    return d.min(axis=1)


def polyline_distance(points, curve):
    """Distance from each query point to the polyline (segments, not vertices)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = curve.vertices
    b = np.roll(a, -1, axis=0) if curve.is_loop else a[1:]
    a = a if curve.is_loop else a[:-1]
    # chunk to bound memory on long curves
    out = np.empty(points.shape[0])
    step = max(1, int(4e6 / max(a.shape[0], 1)))
    for i in range(0, points.shape[0], step):
        out[i : i + step] = _point_segment_dist(points[i : i + step], a, b)
    return out


def hausdorff_distance(curve_a, curve_b, window=None):
    """Symmetric Hausdorff distance between two polylines.

    ``window = (center, radius)`` restricts to vertices inside a ball
    (useful when the curves only coincide locally).
    """
    va, vb = curve_a.vertices, curve_b.vertices
    if window is not None:
        c, r = np.asarray(window[0], float), float(window[1])
        va = va[np.linalg.norm(va - c, axis=1) <= r]
        vb = vb[np.linalg.norm(vb - c, axis=1) <= r]
        if len(va) == 0 or len(vb) == 0:
            return 0.0
    d_ab = polyline_distance(va, curve_b).max()
    d_ba = polyline_distance(vb, curve_a).max()
    return float(max(d_ab, d_ba))


def _segments_cross(a0, a1, b0, b1):
    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (
            q[..., 1] - p[..., 1]
        ) * (r[..., 0] - p[..., 0])

    d1 = orient(b0, b1, a0)
    d2 = orient(b0, b1, a1)
    d3 = orient(a0, a1, b0)
    d4 = orient(a0, a1, b1)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def self_intersects(curve, ignore_adjacent=True):
    """Exact segment-pair crossing test with spatial hashing."""
    a = curve.vertices
    b = np.roll(a, -1, axis=0) if curve.is_loop else a[1:]
    a = a if curve.is_loop else a[:-1]
    m = a.shape[0]
    cell = max(curve.edge_lengths.max(), 1e-12)
    lo = np.minimum(a, b)
    keys = np.floor(lo / cell).astype(np.int64)
    buckets = {}
    for i in range(m):
        kx, ky = keys[i]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                buckets.setdefault((kx + dx, ky + dy), []).append(i)
    seen = set()
    for i in range(m):
        for j in buckets.get(tuple(keys[i]), ()):
            if j <= i or (i, j) in seen:
                continue
            seen.add((i, j))
            if ignore_adjacent:
                if abs(i - j) <= 1:
                    continue
                if curve.is_loop and abs(i - j) == m - 1:
                    continue
            if _segments_cross(a[i], b[i], a[j], b[j]):
                return True
    return False


# -- file format -------------------------------------------------------------


def save_curve(curve, path):
    """Write the JSON curve format (>= 15 significant digits)."""
    payload = {
        "topology": curve.topology,
        "h": curve.h,
        "vertices": [[float(x), float(y)] for x, y in curve.vertices],
        "rays": [{"angle": r.angle, "reach": r.reach} for r in curve.rays],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_curve(path):
    with open(path) as fh:
        payload = json.load(fh)
    rays = tuple(AsymptoticRay(r["angle"], r["reach"]) for r in payload.get("rays", []))
    return PolyCurve(
        np.asarray(payload["vertices"], dtype=float),
        payload["topology"],
        h=payload.get("h", 0.0),
        rays=rays,
    )
