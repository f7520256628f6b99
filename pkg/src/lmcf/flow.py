"""Parametric curve shortening flow with co-evolved angle and primitive.

Positions advance by a semi-implicit arc-length Laplacian step,

    (I - dt * Delta) X_new = X_old,

which is mean curvature motion up to tangential redistribution.  The
tangent angle lift theta and Liouville primitive beta ride along: theta
obeys the heat equation on the curve, beta the heat equation with
source -2 theta (valid where the flow is exact and zero-Maslov, which
for the glued curves means inside B_4 per component).  After every step
both fields are recomputed geometrically; the fields' PDE predictions
are kept as a consistency diagnostic.

Multivalued fields are handled through an explicit holonomy: theta
carries 2 pi times the turning number across the index seam and beta
carries the loop holonomy (twice the enclosed area), which obeys
d(period)/dt = -4 pi k exactly under the flow.  Per-component gauge
constants of beta inside B_4 live on material anchor points whose
values evolve by the pointwise equation d(beta)/dt = <Jx, H> - 2 theta.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from . import geometry as geo
from .geometry import PolyCurve, rot90
from .gluing import BetaAnchor, component_runs


class FlowError(RuntimeError):
    pass


# -- linear algebra -----------------------------------------------------------


def solve_tridiag(lower, diag, upper, rhs):
    """Solve a tridiagonal system via the banded LAPACK driver."""
    n = len(diag)
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def solve_cyclic_tridiag(lower, diag, upper, rhs):
    """Solve a cyclic tridiagonal system by Sherman-Morrison.

    ``lower[i]`` couples row i to i-1 (lower[0] is the corner term),
    ``upper[i]`` couples row i to i+1 (upper[-1] is the other corner).
    """
    n = len(diag)
    if n < 3:
        raise FlowError("cyclic system needs at least 3 rows")
    a, b, c = lower.copy(), diag.copy(), upper.copy()
    alpha = a[0]
    beta_ = c[-1]
    gamma = -b[0]
    b_mod = b.copy()
    b_mod[0] -= gamma
    b_mod[-1] -= alpha * beta_ / gamma
    a_in = a.copy()
    c_in = c.copy()
    a_in[0] = 0.0
    c_in[-1] = 0.0
    if rhs.ndim == 1:
        rhs = rhs[:, None]
        squeeze = True
    else:
        squeeze = False
    u = np.zeros(n)
    u[0] = gamma
    u[-1] = beta_
    y = solve_tridiag(a_in, b_mod, c_in, rhs)
    q = solve_tridiag(a_in, b_mod, c_in, u[:, None])[:, 0]
    v_dot_y = y[0] + (alpha / gamma) * y[-1]
    v_dot_q = q[0] + (alpha / gamma) * q[-1]
    x = y - np.outer(q, np.ones(rhs.shape[1])) * (v_dot_y / (1.0 + v_dot_q))
    return x[:, 0] if squeeze else x


def _laplacian_weights(curve):
    """Arc-length Laplacian stencil (w_prev, w_diag, w_next) per vertex."""
    d_prev, d_next = curve.neighbor_spacing()
    wp = 2.0 / (d_prev * (d_prev + d_next))
    wn = 2.0 / (d_next * (d_prev + d_next))
    return wp, -(wp + wn), wn


def _implicit_heat_solve(curve, values, dt, dirichlet=None):
    """Solve (I - dt Delta) f_new = values on the curve.

    ``dirichlet`` pins the two endpoint rows of an open arc to given
    values; loops use the cyclic solver.
    """
    wp, wd, wn = _laplacian_weights(curve)
    lower = -dt * wp
    diag = 1.0 - dt * wd
    upper = -dt * wn
    rhs = np.asarray(values, dtype=float)
    if curve.is_loop:
        return solve_cyclic_tridiag(lower, diag, upper, rhs)
    lower[0] = upper[0] = 0.0
    lower[-1] = upper[-1] = 0.0
    diag[0] = diag[-1] = 1.0
    rhs = rhs.copy()
    if dirichlet is not None:
        rhs[0] = dirichlet[0]
        rhs[-1] = dirichlet[-1]
    return solve_tridiag(lower, diag, upper, rhs)


# -- flow state ---------------------------------------------------------------


@dataclass
class FieldAnchor:
    """Material gauge point for the local Liouville primitive."""

    material_index: int
    value: float


@dataclass
class FlowState:
    """Snapshot of the evolving curve with its fields and material map."""

    t: float
    curve: PolyCurve
    theta: np.ndarray
    beta: np.ndarray
    beta_period: float
    turning: int
    material: np.ndarray
    anchors: list
    material_seg: np.ndarray = None
    dt_last: float = 0.0
    discrepancy_theta: float = 0.0
    discrepancy_beta: float = 0.0

    def __post_init__(self):
        if self.material_seg is None:
            self.material_seg = _nearest_segments(self.curve, self.material)[0]

    @cached_property
    def kappa(self):
        return geo.curvature(self.curve)[0]

    @property
    def fields(self):
        return geo.LagrangianFields(
            self.theta,
            self.beta,
            self.kappa,
            self.curve.arclength,
            self.beta_period,
            2.0 * np.pi * self.turning,
        )

    def beta_local(self, radius=4.0):
        """Per-component primitive on a ball, gauged by the anchors."""
        mask = self.curve.ball_mask((0.0, 0.0), radius)
        runs = component_runs(mask, self.curve.is_loop)
        out = self.beta[mask].copy()
        pos = {int(i): k for k, i in enumerate(np.flatnonzero(mask))}
        for run in runs:
            offset = 0.0
            if self.anchors:
                mid = self.curve.vertices[run].mean(axis=0)
                best = min(
                    self.anchors,
                    key=lambda a: np.linalg.norm(self.material[a.material_index] - mid),
                )
                p = self.material[best.material_index]
                j = int(np.linalg.norm(self.curve.vertices - p, axis=1).argmin())
                offset = best.value - self.beta[j]
            for i in run:
                out[pos[int(i)]] += offset
        return mask, out, runs


def initial_state(curve, t0=0.0, theta=None, beta=None, anchors=None):
    """Wrap a curve (or glued result) into a starting flow state."""
    from .gluing import GlueResult

    if isinstance(curve, GlueResult):
        res = curve
        anchors = [
            FieldAnchor(
                int(np.linalg.norm(res.curve.vertices - a.point, axis=1).argmin()),
                float(
                    res.beta[
                        np.linalg.norm(res.curve.vertices - a.point, axis=1).argmin()
                    ]
                    + a.offset
                ),
            )
            for a in res.anchors
        ]
        theta, beta = res.theta, res.beta
        period = res.beta_period
        turning = geo.turning_number(res.curve)
        curve = res.curve
    else:
        if theta is None:
            theta = geo.lagrangian_angle(curve)
        if beta is None:
            beta, period = geo.liouville_primitive(curve)
        else:
            period = geo.liouville_primitive(curve)[1]
        turning = geo.turning_number(curve) if curve.is_loop else 0
        if anchors is None:
            anchors = [FieldAnchor(0, float(beta[0]))]
    return FlowState(
        t=t0,
        curve=curve,
        theta=np.asarray(theta, float),
        beta=np.asarray(beta, float),
        beta_period=period,
        turning=turning,
        material=curve.vertices.copy(),
        anchors=list(anchors),
    )


# -- stepping -----------------------------------------------------------------


def _segment_arrays(curve):
    v = curve.vertices
    if curve.is_loop:
        return v, np.roll(v, -1, axis=0)
    return v[:-1], v[1:]


def _nearest_segments(curve, points):
    """Full nearest-segment search; returns (segment index, parameter)."""
    a, b = _segment_arrays(curve)
    ab = b - a
    ab2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    idx = np.empty(points.shape[0], dtype=np.int64)
    tpar = np.empty(points.shape[0])
    chunk = max(1, int(4e6 / max(a.shape[0], 1)))
    for i0 in range(0, points.shape[0], chunk):
        pts = points[i0 : i0 + chunk]
        ap = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pij,ij->pi", ap, ab) / ab2, 0.0, 1.0)
        proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        d2 = np.einsum("pij,pij->pi", pts[:, None, :] - proj, pts[:, None, :] - proj)
        k = d2.argmin(axis=1)
        idx[i0 : i0 + chunk] = k
        tpar[i0 : i0 + chunk] = t[np.arange(len(k)), k]
    return idx, tpar


def _nearest_segments_hinted(curve, points, hints, window=6):
    """Nearest-segment search restricted to a window around the hints.

    Material points move under a CFL-bounded step, so their segment can
    shift only a few slots per step; a local search keeps the material
    update O(M) instead of O(M N).
    """
    a, b = _segment_arrays(curve)
    m = a.shape[0]
    offs = np.arange(-window, window + 1)
    cand = hints[:, None] + offs[None, :]
    if curve.is_loop:
        cand = cand % m
    else:
        cand = np.clip(cand, 0, m - 1)
    aa = a[cand]
    bb = b[cand]
    ab = bb - aa
    ab2 = np.maximum(np.einsum("pij,pij->pi", ab, ab), 1e-300)
    ap = points[:, None, :] - aa
    t = np.clip(np.einsum("pij,pij->pi", ap, ab) / ab2, 0.0, 1.0)
    proj = aa + t[..., None] * ab
    d2 = np.einsum("pij,pij->pi", points[:, None, :] - proj, points[:, None, :] - proj)
    k = d2.argmin(axis=1)
    rows = np.arange(points.shape[0])
    return cand[rows, k], t[rows, k]


def _interp_at_segments(curve, values, idx, tpar):
    """Linear interpolation of per-vertex values at (segment, parameter)."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
        squeeze = True
    else:
        squeeze = False
    vb = np.roll(vals, -1, axis=0) if curve.is_loop else vals[1:]
    va = vals if curve.is_loop else vals[:-1]
    out = va[idx] + tpar[:, None] * (vb[idx] - va[idx])
    return out[:, 0] if squeeze else out


def _interp_normal_velocity(curve, vn, points):
    """Linear interpolation of a per-vertex vector field at given points."""
    idx, tpar = _nearest_segments(curve, points)
    return _interp_at_segments(curve, vn, idx, tpar)


def _field_at_points(curve, values, points):
    """Nearest-vertex linear interpolation of a scalar field."""
    vals = np.asarray(values, float)[:, None]
    pair = np.hstack([vals, vals])
    return _interp_normal_velocity(curve, pair, points)[:, 0]


def evolve_fields(state, dt, theta_bc=None, beta_bc=None):
    """One PDE step of (theta, beta) on the current curve.

    theta satisfies the heat equation, beta the heat equation with
    source -2 theta; multivalued lifts are flattened by subtracting the
    linear-in-arclength holonomy ramp, whose discrete Laplacian
    vanishes identically.  Returns (theta_new, beta_new, period_new).
    """
    curve = state.curve
    L = curve.length
    ramp = curve.arclength / L
    th_hat = state.theta - 2.0 * np.pi * state.turning * ramp
    th_hat_new = _implicit_heat_solve(curve, th_hat, dt, dirichlet=theta_bc)
    theta_new = th_hat_new + 2.0 * np.pi * state.turning * ramp

    period_new = state.beta_period - 4.0 * np.pi * state.turning * dt
    be_hat = state.beta - state.beta_period * ramp
    rhs = be_hat - 2.0 * dt * theta_new
    be_hat_new = _implicit_heat_solve(curve, rhs, dt, dirichlet=beta_bc)
    beta_new = be_hat_new + period_new * ramp
    return theta_new, beta_new, period_new


def step(state, dt, bc=None, resample_band=(0.8, 1.2), h_target=None):
    """Advance the flow by one semi-implicit step.

    ``bc`` (open arcs only) is None to pin the endpoints or a callable
    t -> (2, 2) endpoint positions for prescribed boundary motion.
    Fields are recomputed geometrically afterwards; the PDE-evolved
    fields are compared against them and the gap reported on the
    returned state (beta compared after removing its free constant).
    """
    curve = state.curve
    if h_target is None:
        h_target = curve.h
    x_old = curve.vertices
    if curve.is_loop:
        wp, wd, wn = _laplacian_weights(curve)
        x_new = solve_cyclic_tridiag(
            -dt * wp, 1.0 - dt * wd, -dt * wn, x_old.copy()
        )
    else:
        end_positions = bc(state.t + dt) if callable(bc) else x_old[[0, -1]]
        cols = []
        for k in range(2):
            cols.append(
                _implicit_heat_solve(
                    curve, x_old[:, k], dt, dirichlet=end_positions[:, k]
                )
            )
        x_new = np.stack(cols, axis=1)

    # material points advance by the normal part of the velocity field
    velocity = (x_new - x_old) / dt
    vn = np.einsum("ij,ij->i", velocity, curve.normals)[:, None] * curve.normals
    seg_idx, seg_t = _nearest_segments_hinted(
        curve, state.material, state.material_seg
    )
    material = state.material + dt * _interp_at_segments(curve, vn, seg_idx, seg_t)

    # PDE-evolved fields (diagnostic + anchor transport)
    theta_bc = beta_bc = None
    if not curve.is_loop:
        theta_bc = (state.theta[0], state.theta[-1])
        beta_bc = (
            state.beta[0] - 2.0 * state.theta[0] * dt,
            state.beta[-1] - 2.0 * state.theta[-1] * dt,
        )
    theta_pde, beta_pde, period_pde = evolve_fields(
        state, dt, theta_bc=theta_bc, beta_bc=beta_bc
    )

    # anchors ride their material points: d(beta)/dt = <Jx, H> - 2 theta
    anchors = []
    if state.anchors:
        kap = state.kappa
        hv = kap[:, None] * curve.normals
        jxh = np.einsum("ij,ij->i", rot90(curve.vertices), hv)
        ai = np.array([a.material_index for a in state.anchors])
        rate = _interp_at_segments(
            curve, jxh - 2.0 * state.theta, seg_idx[ai], seg_t[ai]
        )
        anchors = [
            FieldAnchor(a.material_index, a.value + dt * float(r))
            for a, r in zip(state.anchors, np.atleast_1d(rate))
        ]

    new_curve = PolyCurve(x_new, curve.topology, h=curve.h, rays=curve.rays)

    # geometric recomputation and branch alignment
    theta_geo = geo.lagrangian_angle(new_curve, start_branch=theta_pde[0])
    beta_geo, period_geo = geo.liouville_primitive(new_curve)
    d_beta = beta_pde - beta_geo
    disc_theta = float(np.abs(theta_pde - theta_geo).max())
    disc_beta = float(np.abs(d_beta - d_beta.mean()).max())

    new_state = FlowState(
        t=state.t + dt,
        curve=new_curve,
        theta=theta_geo,
        beta=beta_geo,
        beta_period=period_geo,
        turning=state.turning,
        material=material,
        anchors=anchors,
        material_seg=seg_idx,
        dt_last=dt,
        discrepancy_theta=disc_theta,
        discrepancy_beta=disc_beta,
    )

    e = new_curve.edge_lengths
    if e.min() < resample_band[0] * h_target or e.max() > resample_band[1] * h_target:
        new_state = resample_state(new_state, h_target)
    return new_state


def resample_state(state, h):
    """Redistribute vertices and recompute fields geometrically.

    The target spacing shrinks with the curve when needed so the
    vertex-count floor is always satisfiable.
    """
    h = min(h, state.curve.length / (geo.PolyCurve.MIN_VERTICES + 1))
    new_curve = geo.resample(state.curve, h)
    theta = geo.lagrangian_angle(new_curve)
    ref = _field_at_points(state.curve, state.theta, new_curve.vertices[:1])
    theta += 2.0 * np.pi * np.round((ref[0] - theta[0]) / (2.0 * np.pi))
    beta, period = geo.liouville_primitive(new_curve)
    # seed the material hints from arc positions; the windowed search
    # in the next step corrects the few-slot error
    idx, tpar = _nearest_segments_hinted(
        state.curve, state.material, state.material_seg
    )
    s_m = state.curve.arclength[idx] + tpar * state.curve.edge_lengths[idx]
    n_seg = new_curve.n if new_curve.is_loop else new_curve.n - 1
    hints = np.clip(
        (s_m / max(new_curve.h, 1e-300)).astype(np.int64), 0, n_seg - 1
    )
    return replace(
        state,
        curve=new_curve,
        theta=theta,
        beta=beta,
        beta_period=period,
        material_seg=hints,
    )


@dataclass
class FlowRun:
    """Time-ordered snapshots of one flow plus the termination record."""

    snapshots: list
    termination: str
    h: float
    s: float = 0.0

    @property
    def times(self):
        return np.array([st.t for st in self.snapshots])

    def at_time(self, t, tol=1e-9):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.snapshots[k].t - t) > tol:
            raise FlowError(f"no snapshot at t={t} (nearest {self.snapshots[k].t})")
        return self.snapshots[k]

    def nearest(self, t):
        return self.snapshots[int(np.argmin(np.abs(self.times - t)))]


def run_flow(
    start,
    T,
    dt=None,
    snap_every=None,
    bc=None,
    cfl=5.0,
    blowup_kh=0.5,
    max_refinements=2,
    s=0.0,
):
    """Evolve from ``start`` (curve, GlueResult, or FlowState) to time T.

    Snapshots are recorded every ``snap_every`` (default: 20 per run).
    The run terminates early when curvature outruns the resolution:
    one resolution doubling is attempted ``max_refinements`` times at
    half the blowup threshold, after which the run stops with reason
    'curvature blowup'.
    """
    state = start if isinstance(start, FlowState) else initial_state(start)
    h = state.curve.h
    if snap_every is None:
        snap_every = T / 20.0
    if dt is None:
        dt = min(cfl * h * h, snap_every)
    n_sub = max(1, int(np.ceil(snap_every / dt)))
    dt = snap_every / n_sub
    snapshots = [state]
    refinements = 0
    termination = "time reached"
    n_snaps = int(round(T / snap_every))
    for _ in range(n_snaps):
        for _ in range(n_sub):
            # judged against the budgeted resolution: the vertex-count
            # floor may shrink spacing further, but that emergency
            # refinement must not mask a genuine curvature blowup
            kh = np.abs(state.kappa).max() * h
            if kh > blowup_kh / 2.0 and refinements < max_refinements:
                h = state.curve.h / 2.0
                state = resample_state(state, h)
                refinements += 1
            elif kh > blowup_kh:
                termination = "curvature blowup"
                snapshots.append(state)
                return FlowRun(snapshots, termination, h, s)
            state = step(state, dt, bc=bc, h_target=h)
        snapshots.append(state)
    return FlowRun(snapshots, termination, h, s)


# -- diagnostics --------------------------------------------------------------


def exactness_audit(run, radius=3.0):
    """Holonomy of the Liouville form inside a ball, per snapshot.

    Closed loops fully inside the ball report their period (twice the
    enclosed area); open components are exact by construction and
    report zero.
    """
    records = []
    for st in run.snapshots:
        mask = st.curve.ball_mask((0.0, 0.0), radius)
        if mask.all() and st.curve.is_loop:
            records.append({"t": st.t, "period": st.beta_period, "closed": True})
        else:
            records.append({"t": st.t, "period": 0.0, "closed": False})
    return records


def normal_deviation(run, s, annulus, window=None):
    """Sup of |rescaled material displacement| over an annulus.

    The rescaled material map is F(x, t) / sqrt(2 (s + t)); the sup
    runs over material points whose initial rescaled position lies in
    ``annulus = (r_lo, r_hi)`` and snapshots in ``window``.
    """
    st0 = run.snapshots[0]
    f0 = st0.material / np.sqrt(2.0 * (s + st0.t))
    r = np.linalg.norm(f0, axis=1)
    sel = (r >= annulus[0]) & (r <= annulus[1])
    if not sel.any():
        return 0.0, None
    worst = 0.0
    arg = None
    for st in run.snapshots[1:]:
        if window is not None and not (window[0] <= st.t <= window[1]):
            continue
        ft = st.material / np.sqrt(2.0 * (s + st.t))
        dev = np.linalg.norm(ft[sel] - f0[sel], axis=1)
        k = int(dev.argmax())
        if dev[k] > worst:
            worst = float(dev[k])
            arg = {"t": st.t, "x0": f0[sel][k].tolist()}
    return worst, arg


def annulus_bounds(run, annulus=(1.0 / 3.0, 3.0)):
    """Time series of sup(|A| + |theta| + |beta|) over an annulus.

    beta is taken in the per-component gauge of the B_4 primitive.
    Returns (records, smallest D4).
    """
    from .gluing import theta_local

    records = []
    for st in run.snapshots:
        rnorm = np.linalg.norm(st.curve.vertices, axis=1)
        sel = (rnorm >= annulus[0]) & (rnorm <= annulus[1])
        if not sel.any():
            records.append({"t": st.t, "sup": 0.0, "empty": True})
            continue
        mask, beta_loc, _ = st.beta_local(4.0)
        beta_full = st.beta.copy()
        beta_full[mask] = beta_loc
        mask_t, theta_loc, _ = theta_local(st.curve, st.theta, 4.0)
        theta_full = st.theta.copy()
        theta_full[mask_t] = theta_loc
        kap = st.kappa
        val = np.abs(kap[sel]) + np.abs(theta_full[sel]) + np.abs(beta_full[sel])
        records.append({"t": st.t, "sup": float(val.max()), "empty": False})
    d4 = max(r["sup"] for r in records)
    return records, d4


# -- persistence --------------------------------------------------------------


def save_run(run, outdir):
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "termination": run.termination,
        "h": run.h,
        "s": run.s,
        "times": [st.t for st in run.snapshots],
        "snapshots": [],
    }
    for k, st in enumerate(run.snapshots):
        name = f"snap_{k:04d}.json"
        payload = {
            "t": st.t,
            "topology": st.curve.topology,
            "h": st.curve.h,
            "vertices": st.curve.vertices.tolist(),
            "rays": [{"angle": r.angle, "reach": r.reach} for r in st.curve.rays],
            "theta": st.theta.tolist(),
            "beta": st.beta.tolist(),
            "beta_period": st.beta_period,
            "turning": st.turning,
            "material": st.material.tolist(),
            "anchors": [
                {"material_index": a.material_index, "value": a.value}
                for a in st.anchors
            ],
        }
        with open(os.path.join(outdir, name), "w") as fh:
            json.dump(payload, fh)
        manifest["snapshots"].append(name)
    with open(os.path.join(outdir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return os.path.join(outdir, "run.json")


def load_run(path):
    base = os.path.dirname(path)
    with open(path) as fh:
        manifest = json.load(fh)
    snaps = []
    for name in manifest["snapshots"]:
        with open(os.path.join(base, name)) as fh:
            p = json.load(fh)
        rays = tuple(geo.AsymptoticRay(r["angle"], r["reach"]) for r in p["rays"])
        curve = PolyCurve(np.asarray(p["vertices"]), p["topology"], p["h"], rays)
        snaps.append(
            FlowState(
                t=p["t"],
                curve=curve,
                theta=np.asarray(p["theta"]),
                beta=np.asarray(p["beta"]),
                beta_period=p["beta_period"],
                turning=p["turning"],
                material=np.asarray(p["material"]),
                anchors=[
                    FieldAnchor(a["material_index"], a["value"])
                    for a in p["anchors"]
                ],
            )
        )
    return FlowRun(snaps, manifest["termination"], manifest["h"], manifest["s"])
