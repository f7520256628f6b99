"""Monotone quantities and closeness functionals for the expander surgery.

Contents: the localized monotonicity inequality for alpha = beta + 2 t
theta under a B_2/B_3 cutoff, the L^2 expander deviation and its time
average on the rescaled flow, proximity of the rescaled flow to the
asymptotic pair, graph-based C^{1,alpha} closeness between curves, and
the combined stability hypothesis report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import geometry as geo
from .density import _gauss_scale, density_ratio
from .geometry import PolyCurve, rot90
from .gluing import ball_cutoff, ball_cutoff_constant


class ClosenessError(RuntimeError):
    """Structural failure of a graphical decomposition."""


# -- alpha monotonicity -------------------------------------------------------


def _alpha_field(state, use_local_beta=True):
    """alpha = beta + 2 t theta in the per-component B_4 gauge."""
    beta = state.beta.copy()
    if use_local_beta and state.curve.is_loop:
        mask, beta_loc, _ = state.beta_local(4.0)
        beta[mask] = beta_loc
    return beta + 2.0 * state.t * state.theta


def _weighted_integral(state, values, x0, t0):
    """integral of phi(|x|) * values * rho_{(x0,t0)} over the curve."""
    rnorm = np.linalg.norm(state.curve.vertices, axis=1)
    phi = np.array([ball_cutoff(r)[0] for r in rnorm])
    tau = t0 - state.t
    rho = _gauss_scale(np.asarray(x0, float), np.sqrt(tau))(state.curve.vertices)
    return geo.curve_integral(state.curve, phi * values * rho)


@dataclass
class AlphaRecord:
    t: float
    lhs: float
    rhs: float

    @property
    def residual(self):
        return self.lhs - self.rhs


def alpha_monotonicity_check(run, x0=(0.0, 0.0), t0=None):
    """Per-step residuals of the localized alpha monotonicity inequality.

    Compares the centred time difference of int phi alpha^2 rho with
    the bound -int phi |2tH - x^perp|^2 rho + C(phi) int_{B3 \\ B2}
    alpha^2 rho; the inequality asks residual <= discretization slack.
    The kernel center time defaults to twice the run horizon.
    """
    if t0 is None:
        t0 = 2.0 * run.snapshots[-1].t + 0.5
    c_phi = ball_cutoff_constant()
    weighted = []
    for st in run.snapshots:
        alpha = _alpha_field(st)
        weighted.append(_weighted_integral(st, alpha**2, x0, t0))
    records = []
    for k in range(1, len(run.snapshots) - 1):
        st = run.snapshots[k]
        t_prev = run.snapshots[k - 1].t
        t_next = run.snapshots[k + 1].t
        lhs = (weighted[k + 1] - weighted[k - 1]) / (t_next - t_prev)
        alpha = _alpha_field(st)
        curve = st.curve
        kap = st.kappa
        xn = np.einsum("ij,ij->i", curve.vertices, curve.normals)
        dev = (2.0 * st.t * kap - xn) ** 2
        tau = t0 - st.t
        rho = _gauss_scale(np.asarray(x0, float), np.sqrt(tau))(curve.vertices)
        rnorm = np.linalg.norm(curve.vertices, axis=1)
        phi = np.array([ball_cutoff(r)[0] for r in rnorm])
        term1 = geo.curve_integral(curve, phi * dev * rho)
        ann = ((rnorm >= 2.0) & (rnorm <= 3.0)).astype(float)
        term2 = geo.curve_integral(curve, ann * alpha**2 * rho)
        records.append(AlphaRecord(t=st.t, lhs=lhs, rhs=-term1 + c_phi * term2))
    return records


def alpha_gradient_identity(state):
    """Discrete check of grad(alpha) = (J x)^perp-part minus 2 t J H.

    Along a curve this reads d(alpha)/ds = <Jx, T> + 2 t d(theta)/ds;
    returns the max deviation of the finite-difference derivative.
    """
    curve = state.curve
    alpha = _alpha_field(state, use_local_beta=False)
    s = curve.arclength
    dal = np.gradient(alpha, s)
    jxt = np.einsum("ij,ij->i", rot90(curve.vertices), curve.tangents)
    dth = np.gradient(state.theta, s)
    interior = slice(2, -2)
    return float(np.abs((dal - jxt - 2.0 * state.t * dth)[interior]).max())


# -- expander deviation -------------------------------------------------------


def expander_deviation(curve, radius=None, kappa=None):
    """integral of |H - x^perp|^2 over the curve (up to a ball), plus sup.

    For curves H - x^perp = (kappa - <x, N>) N, so both norms reduce to
    the scalar expander residual.
    """
    if kappa is None:
        kappa = geo.curvature(curve)[0]
    xn = np.einsum("ij,ij->i", curve.vertices, curve.normals)
    dev = (kappa - xn) ** 2
    if radius is not None:
        dev = dev * (np.linalg.norm(curve.vertices, axis=1) <= radius)
    integral = geo.curve_integral(curve, dev)
    return float(integral), float(np.sqrt(dev.max()))


def time_averaged_deviation(run, s, T, a, radius):
    """Average of the rescaled expander deviation over [T, aT].

    The deviation is evaluated on the rescaled slices
    curve / sqrt(2 (s + t)) inside B_radius and averaged in time by the
    trapezoid rule over the run's snapshots.
    """
    if a <= 1.0:
        raise ValueError("need a > 1")
    if run.snapshots[-1].t < a * T - 1e-12:
        raise ValueError("window exceeds the run")
    ts, vals = [], []
    for st in run.snapshots:
        if T - 1e-12 <= st.t <= a * T + 1e-12:
            lam = np.sqrt(2.0 * (s + st.t))
            rescaled = st.curve.scaled(1.0 / lam)
            v, _ = expander_deviation(rescaled, radius=radius)
            ts.append(st.t)
            vals.append(v)
    if len(ts) < 2:
        raise ValueError("window contains fewer than two snapshots")
    return float(np.trapezoid(vals, ts) / ((a - 1.0) * T))


# -- proximity to the pair ----------------------------------------------------


def _dist_to_pair(points, pair):
    d = np.inf * np.ones(points.shape[0])
    for e in pair.line_directions():
        d = np.minimum(d, np.abs(points @ rot90(e)))
    return d


def _min_c1(dist, rnorm, nu, floor=1e-12):
    """Smallest C with dist <= nu + C exp(-r^2 / C) at every sample.

    Gaps below ``floor`` count as zero: the required constant depends
    only logarithmically on the gap, so round-off distances would
    otherwise report spurious finite constants.
    """
    need = 0.0
    for di, ri in zip(dist, rnorm):
        gap = di - nu
        if gap <= floor:
            continue

        def f(c):
            return c * np.exp(-ri * ri / c) - gap

        lo, hi = 1e-6, 1e6
        if f(hi) < 0.0:
            return np.inf
        need = max(need, brentq(f, lo, hi, xtol=1e-10))
    return need


@dataclass
class ProximityRecord:
    t: float
    c1_min: float
    n_points: float
    max_rescaled_theta: float


def proximity_check(run, s, pair, nu, eps0=0.05, r1=None, n_r=3):
    """Distance of the rescaled flow to the pair on the growing annulus.

    Per snapshot reports the smallest C making
    dist(y, P) <= nu + C exp(-|y|^2 / C) hold over
    A(r1, (s+t)^(-1/8)), together with the largest rescaled density
    ratio there (compared against 1 + eps0/2 + nu by the caller).
    """
    if r1 is None:
        r1 = 1.0
    records = []
    for st in run.snapshots:
        lam = np.sqrt(2.0 * (s + st.t))
        rescaled = st.curve.scaled(1.0 / lam)
        rnorm = np.linalg.norm(rescaled.vertices, axis=1)
        hi = (s + st.t) ** (-1.0 / 8.0)
        sel = (rnorm >= r1) & (rnorm <= hi)
        if not sel.any():
            records.append(ProximityRecord(st.t, 0.0, 0, 0.0))
            continue
        pts = rescaled.vertices[sel]
        dist = _dist_to_pair(pts, pair)
        c1 = _min_c1(dist, rnorm[sel], nu)
        theta_max = 0.0
        stride = max(1, sel.sum() // 8)
        for y0 in pts[::stride]:
            for r in np.geomspace(max(4.0 * rescaled.h, 0.25), 2.0, n_r):
                theta_max = max(
                    theta_max, density_ratio(rescaled, y0, r, guard=False).value
                )
        records.append(ProximityRecord(st.t, c1, int(sel.sum()), theta_max))
    return records


# -- C^{1,alpha} closeness ----------------------------------------------------


@dataclass
class BallCheck:
    center: tuple
    norm: float
    ok: bool
    reason: str = ""


@dataclass
class ClosenessReport:
    eps: float
    alpha: float
    passed: bool
    worst_norm: float
    n_balls: int
    failures: list

    @property
    def pass_flag(self):
        return self.passed


def _components_in_ball(curve, center, radius=1.0, min_pts=4):
    """Components of the curve inside a ball, with penetration depths."""
    d = np.linalg.norm(curve.vertices - center, axis=1)
    mask = d <= radius
    from .gluing import component_runs

    runs, depths = [], []
    for r in component_runs(mask, curve.is_loop):
        if len(r) < min_pts:
            continue
        runs.append(r)
        depths.append(radius - d[r].min())
    return runs, depths


def _graph_over_line(points, base, direction):
    t = (points - base) @ direction
    u = (points - base) @ rot90(direction)
    order = np.argsort(t)
    t, u = t[order], u[order]
    dt = np.diff(t)
    if np.any(dt <= 1e-12):
        raise ClosenessError("portion is not single-valued over the line")
    return t, u


def _holder_seminorm(t, du, alpha):
    worst = 0.0
    n = len(du)
    stride = 1
    while stride < n:
        gap = np.abs(du[stride:] - du[:-stride])
        sep = np.abs(t[stride:] - t[:-stride])
        good = sep > 1e-12
        if good.any():
            worst = max(worst, float((gap[good] / sep[good] ** alpha).max()))
        stride *= 2
    return worst


DEEP_PENETRATION = 0.85
MIN_OVERLAP = 0.15


def _ball_norm(curve_a, curve_b, center, alpha):
    """Worst matched-pair graph norm in one unit ball.

    Components of the two curves are matched greedily by midpoint
    distance in order of decreasing penetration depth.  A component
    left unmatched certifies a pointwise difference at least as large
    as its penetration depth, so it fails the ball only beyond
    DEEP_PENETRATION (the norm budget is 1; the gap to 1 absorbs the
    vertex quantization of grazing chords).  Shallower strays are
    boundary artifacts whose norm contribution is captured by the
    neighboring ball centers.
    """
    runs_a, dep_a = _components_in_ball(curve_a, center)
    runs_b, dep_b = _components_in_ball(curve_b, center)
    if not runs_a and not runs_b:
        return 0.0, True, "empty"
    mids_a = [curve_a.vertices[r].mean(axis=0) for r in runs_a]
    mids_b = [curve_b.vertices[r].mean(axis=0) for r in runs_b]
    order = sorted(range(len(runs_a)), key=lambda i: -dep_a[i])
    used = set()
    pairs = []
    for i in order:
        free = [j for j in range(len(runs_b)) if j not in used]
        if not free:
            if dep_a[i] >= DEEP_PENETRATION:
                return np.inf, False, "unmatched sheet of the first curve"
            continue
        j = min(free, key=lambda j: np.linalg.norm(mids_b[j] - mids_a[i]))
        used.add(j)
        pairs.append((i, j))
    for j in range(len(runs_b)):
        if j not in used and dep_b[j] >= DEEP_PENETRATION:
            return np.inf, False, "unmatched sheet of the second curve"
    worst = 0.0
    for i, j in pairs:
        pa = curve_a.vertices[runs_a[i]]
        pb = curve_b.vertices[runs_b[j]]
        mid_a = pa.mean(axis=0)
        # common line: principal direction of the first curve's portion
        centered = pa - mid_a
        w, vecs = np.linalg.eigh(centered.T @ centered)
        direction = vecs[:, int(np.argmax(w))]
        try:
            ta, ua = _graph_over_line(pa, mid_a, direction)
            tb, ub = _graph_over_line(pb, mid_a, direction)
        except ClosenessError:
            # fall back to the second curve's principal direction
            centered_b = pb - pb.mean(axis=0)
            wb, vecs_b = np.linalg.eigh(centered_b.T @ centered_b)
            direction = vecs_b[:, int(np.argmax(wb))]
            try:
                ta, ua = _graph_over_line(pa, mid_a, direction)
                tb, ub = _graph_over_line(pb, mid_a, direction)
            except ClosenessError:
                return np.inf, False, "no common graph line"
        lo = max(ta[0], tb[0])
        hi = min(ta[-1], tb[-1])
        if hi - lo < MIN_OVERLAP:
            if min(dep_a[i], dep_b[j]) >= DEEP_PENETRATION:
                return np.inf, False, "graph windows do not overlap"
            continue
        grid = np.linspace(lo, hi, 48)
        fa = np.interp(grid, ta, ua)
        fb = np.interp(grid, tb, ub)
        diff = fa - fb
        d_diff = np.gradient(diff, grid)
        norm = (
            float(np.abs(diff).max())
            + float(np.abs(d_diff).max())
            + _holder_seminorm(grid, d_diff, alpha)
        )
        worst = max(worst, norm)
    return worst, worst <= 1.0, "" if worst <= 1.0 else "norm above one"


def c1alpha_closeness(curve_a, curve_b, eps, alpha=0.5, window=None):
    """Literal epsilon-closeness: rescale by 1/eps, compare unit-ball graphs.

    Both curves are dilated by 1/eps; the window (center, radius, in
    original scale; defaults to the first curve's extent) is covered by
    unit balls on a half-unit lattice.  In every ball the portions are
    decomposed as graphs over the principal direction of the first
    curve's portion and the C^{1,alpha} norm of the difference must not
    exceed one.  Hoelder quotients are sampled at dyadic separations.
    """
    # unit balls in the rescaled picture must see several vertices, so
    # refine the sampling when the rescaled spacing would be coarse
    h_need = 0.1 * eps
    a = curve_a if curve_a.h <= h_need else geo.resample(curve_a, h_need)
    b = curve_b if curve_b.h <= h_need else geo.resample(curve_b, h_need)
    a = a.scaled(1.0 / eps)
    b = b.scaled(1.0 / eps)
    if window is None:
        lo = curve_a.vertices.min(axis=0)
        hi = curve_a.vertices.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = 0.5 * float(np.linalg.norm(hi - lo))
    else:
        center, radius = np.asarray(window[0], float), float(window[1])
    c_s = center / eps
    r_s = radius / eps
    # candidate ball centers: half-unit lattice cells near the first curve
    cells = set()
    for v in a.vertices:
        if np.linalg.norm(v - c_s) > r_s + 1.0:
            continue
        base = np.floor(v * 2.0)
        for dx in (-1, 0, 1, 2):
            for dy in (-1, 0, 1, 2):
                cells.add(((base[0] + dx) / 2.0, (base[1] + dy) / 2.0))
    failures = []
    worst = 0.0
    n_balls = 0
    for cx, cy in sorted(cells):
        if np.hypot(cx - c_s[0], cy - c_s[1]) > r_s:
            continue
        n_balls += 1
        norm, ok, reason = _ball_norm(a, b, np.array([cx, cy]), alpha)
        if norm != np.inf:
            worst = max(worst, norm)
        if not ok:
            failures.append(BallCheck((cx, cy), norm, ok, reason))
    return ClosenessReport(
        eps=eps,
        alpha=alpha,
        passed=not failures,
        worst_norm=worst,
        n_balls=n_balls,
        failures=failures,
    )


# -- stability hypotheses -----------------------------------------------------


@dataclass
class StabilityParams:
    # tau must be small enough that the opposite branch of the
    # expander contributes less than eps0 to the Gaussian at scale tau
    R_tilde: float = 4.0
    r: float = 1.0
    tau: float = 0.25
    M: float = 2.0
    eps0: float = 0.05
    eta: float = 1e-3
    nu: float = 0.05
    C_dist: float = 1.0
    eps_close: float = 0.1


@dataclass
class StabilityReport:
    curvature_ok: bool
    density_ok: bool
    deviation_ok: bool
    structure_ok: bool
    sup_kappa: float
    max_theta: float
    deviation: float
    n_components: int
    closeness: object

    @property
    def all_pass(self):
        return (
            self.curvature_ok
            and self.density_ok
            and self.deviation_ok
            and self.structure_ok
        )


def stability_hypotheses_check(curve, expander_set, params=None):
    """Numerical audit of the four stability hypotheses plus closeness.

    (i) curvature bound, (ii) density ratios of the static slice,
    (iii) L^2 expander deviation, (iv) component correspondence with
    the distance bound to the pair.  The theorem's conclusion is
    probed directly by measuring C^{1,alpha} closeness to the expander
    inside the ball.  ``curve`` may be a list of disjoint pieces (the
    expander itself comes as two arcs); integrals then sum over the
    pieces while structural checks use the union.
    """
    if params is None:
        params = StabilityParams()
    p = params
    pieces = list(curve) if isinstance(curve, (list, tuple)) else [curve]
    merged = pieces[0] if len(pieces) == 1 else _merge_arcs(pieces)

    sup_kappa = 0.0
    deviation = 0.0
    for c in pieces:
        kap = geo.curvature(c)[0]
        rn = np.linalg.norm(c.vertices, axis=1)
        inside = rn <= p.R_tilde
        if inside.any():
            sup_kappa = max(sup_kappa, float(np.abs(kap[inside]).max()))
        deviation += expander_deviation(c, radius=p.R_tilde, kappa=kap)[0]
    curvature_ok = sup_kappa <= p.M
    deviation_ok = deviation <= p.eta

    max_theta = 0.0
    stride = max(1, merged.n // 24)
    h_min = min(c.h for c in pieces)
    for x0 in merged.vertices[::stride]:
        for r in np.geomspace(max(2.5 * h_min, p.tau / 8.0), p.tau, 3):
            total = sum(density_ratio(c, x0, r).value for c in pieces)
            max_theta = max(max_theta, total)
    density_ok = max_theta <= 1.0 + p.eps0

    rnorm = np.linalg.norm(merged.vertices, axis=1)
    ann = (rnorm >= p.r) & (rnorm <= p.R_tilde)
    from .gluing import component_runs

    runs = [r for r in component_runs(ann, merged.is_loop) if len(r) >= 3]
    n_components = len(runs)
    pair_components = 4
    dist_ok = True
    if ann.any():
        dist = _dist_to_pair(merged.vertices[ann], expander_set.pair)
        bound = p.nu + p.C_dist * np.exp(-rnorm[ann] ** 2 / p.C_dist)
        dist_ok = bool(np.all(dist <= bound))
    structure_ok = (n_components == pair_components) and dist_ok

    sigma = _merge_arcs(expander_set.polylines(h=h_min))
    closeness = c1alpha_closeness(
        merged, sigma, p.eps_close, window=((0.0, 0.0), p.R_tilde)
    )
    return StabilityReport(
        curvature_ok=curvature_ok,
        density_ok=density_ok,
        deviation_ok=deviation_ok,
        structure_ok=structure_ok,
        sup_kappa=sup_kappa,
        max_theta=max_theta,
        deviation=deviation,
        n_components=n_components,
        closeness=closeness,
    )


def _merge_arcs(arcs):
    """Concatenate disjoint arcs into one vertex cloud curve for distance work.

    The result is only used for nearest-point queries and per-ball
    graph extraction, where connectivity across the gap never enters
    (the arcs are far apart at unit-ball scale after rescaling).
    """
    verts = np.vstack([a.vertices for a in arcs])
    return PolyCurve(verts, "arc", h=arcs[0].h, rays=arcs[0].rays)