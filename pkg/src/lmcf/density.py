"""Backwards heat kernel, Gaussian density ratios, and monotonicity checks.

All densities are one-dimensional: the kernel carries the (4 pi tau)^(-1/2)
normalization so a straight line through the center has ratio exactly 1.
Three variants are used:

* plain           Theta(x0, t0, r) over the time slice t0 - r^2,
* modified        Theta_t(x0, r), the same Gaussian applied to the
                  current slice (well behaved under parabolic rescaling),
* rescaled        the modified ratio of the curve divided by
                  sqrt(2 (s + t)).

Open curves integrate their asymptotic rays in closed form through the
complementary error function, so unbounded test configurations (lines,
expanders) have exact tails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from . import geometry as geo
from .geometry import PolyCurve


class DensityError(ValueError):
    pass


def heat_kernel(x0, t0, x, t):
    """Backwards heat kernel rho_{(x0, t0)}(x, t) for curves (n = 1)."""
    if t >= t0:
        raise DensityError("kernel requires t < t0")
    tau = t0 - t
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d2 = np.einsum("ij,ij->i", x - np.asarray(x0, float), x - np.asarray(x0, float))
    with np.errstate(under="ignore"):
        vals = np.exp(-d2 / (4.0 * tau)) / np.sqrt(4.0 * np.pi * tau)
    vals[vals < 1e-300] = 0.0
    return vals if vals.size > 1 else float(vals[0])


def _gauss_scale(x0, r):
    """Gaussian of scale r centred at x0, as a callable on points."""
    x0 = np.asarray(x0, dtype=float)

    def f(points):
        d2 = np.einsum("ij,ij->i", points - x0, points - x0)
        with np.errstate(under="ignore"):
            return np.exp(-d2 / (4.0 * r * r)) / np.sqrt(4.0 * np.pi * r * r)

    return f


def _ray_tail(x0, r, point, direction):
    """Integral of the scale-r Gaussian along the ray point + s*direction."""
    u = np.asarray(point, float) - np.asarray(x0, float)
    a = float(np.dot(u, direction))
    d_perp2 = float(np.dot(u, u)) - a * a
    with np.errstate(under="ignore"):
        return 0.5 * np.exp(-d_perp2 / (4.0 * r * r)) * erfc(a / (2.0 * r))


@dataclass(frozen=True)
class DensityReport:
    value: float
    quad_error: float
    tail: float
    x0: tuple
    r: float


def density_ratio(curve, x0, r, order=6, guard=True):
    """Gaussian density ratio of one curve slice at center x0 and scale r.

    Gauss-Legendre on the polyline plus exact erfc tails along the
    asymptotic rays of open arcs.  The quadrature error estimate comes
    from doubling the order.  Scales below twice the resolution are
    refused (the polyline is secretly straight there and the answer
    would be a vacuous 1).
    """
    if guard and r < 2.0 * curve.h:
        raise DensityError(f"scale r={r:.3g} below resolution guard 2h={2*curve.h:.3g}")
    f = _gauss_scale(x0, r)
    tail_fn = None
    if not curve.is_loop:
        tail_fn = lambda p, d: _ray_tail(x0, r, p, d)
    finite, tail = geo.curve_integral(
        curve, f, order=order, ray_tail=tail_fn, return_parts=True
    )
    finite2, _ = geo.curve_integral(
        curve, f, order=2 * order, ray_tail=None, return_parts=True
    )
    return DensityReport(
        value=finite + tail,
        quad_error=abs(finite2 - finite),
        tail=tail,
        x0=(float(x0[0]), float(x0[1])),
        r=float(r),
    )


def plain_density(run, x0, t0, r, order=6):
    """Huisken's ratio Theta(x0, t0, r), integrating the slice at t0 - r^2."""
    state = run.at_time(t0 - r * r)
    return density_ratio(state.curve, x0, r, order=order)


def modified_density(state_or_curve, x0, r, order=6):
    curve = getattr(state_or_curve, "curve", state_or_curve)
    return density_ratio(curve, x0, r, order=order)


def rescaled_density(state, s, x0, r, order=6):
    lam = np.sqrt(2.0 * (s + state.t))
    return density_ratio(state.curve.scaled(1.0 / lam), x0, r, order=order)


def rescaled_identity_check(state, s, x0, r, order=6):
    """Relative gap in Theta^s_t(x0, r) = rescaled ratio at mapped arguments.

    This is an exact change of variables; the gap measures only
    floating-point noise and should sit near 1e-15.
    """
    lam = np.sqrt(2.0 * (s + state.t))
    lhs = modified_density(state, x0, r, order=order).value
    rhs = rescaled_density(
        state, s, (x0[0] / lam, x0[1] / lam), r / lam, order=order
    ).value
    return abs(lhs - rhs) / max(abs(lhs), 1e-300)


# -- Huisken monotonicity -----------------------------------------------------


def _kernel_integral(state, x0, t0, order=6):
    """integral of rho_{(x0,t0)} over the slice at the state's time."""
    tau = t0 - state.t
    if tau <= 0:
        raise DensityError("slice is not before the kernel's center time")
    return density_ratio(state.curve, x0, np.sqrt(tau), order=order, guard=False)


def _deviation_integral(state, x0, t0, order=6):
    """integral of |H - (x0-x)^perp / 2(t0-t)|^2 rho over the slice."""
    curve = state.curve
    tau = t0 - state.t
    kap = state.kappa
    dn = np.einsum(
        "ij,ij->i", np.asarray(x0, float)[None, :] - curve.vertices, curve.normals
    )
    dev = (kap - dn / (2.0 * tau)) ** 2
    rho = _gauss_scale(x0, np.sqrt(tau))(curve.vertices)
    finite = geo.curve_integral(curve, dev * rho, order=order)
    tail = 0.0
    if not curve.is_loop:
        # on an exact ray H = 0 and <x0 - x, N> is constant along it
        for k, ray in zip((0, -1), curve.rays):
            p = curve.vertices[k]
            n = geo.rot90(ray.direction)
            c = float(np.dot(np.asarray(x0, float) - p, n))
            tail += (c / (2.0 * tau)) ** 2 * _ray_tail(
                x0, np.sqrt(tau), p, ray.direction
            )
    return finite + tail


@dataclass
class MonotonicityReport:
    x0: tuple
    t0: float
    r_grid: np.ndarray
    theta_values: np.ndarray
    min_increment: float
    derivative_records: list

    @property
    def max_residual(self):
        if not self.derivative_records:
            return 0.0
        return max(abs(r["residual"]) for r in self.derivative_records)


def huisken_monotonicity_check(run, x0, t0, n_scales=6, order=6):
    """Monotonicity of Theta(x0, t0, r) in r plus the derivative identity.

    Scales are taken as r_k = sqrt(t0 - t_k) over snapshot times so no
    interpolation in time is needed.  The derivative check compares a
    centred difference of the kernel integral with the deviation
    integral at interior snapshots.
    """
    times = run.times
    usable = [t for t in times if t < t0]
    if len(usable) < 3:
        raise DensityError("insufficient snapshots before t0")
    h = run.snapshots[-1].curve.h
    r_all = np.sqrt(t0 - np.array(usable))
    keep = r_all >= 2.0 * h
    r_grid = np.sort(r_all[keep])[: max(n_scales, 3)]
    theta_vals = []
    for r in r_grid:
        theta_vals.append(plain_density(run, x0, t0, r, order=order).value)
    theta_vals = np.asarray(theta_vals)
    inc = np.diff(theta_vals).min() if len(theta_vals) > 1 else 0.0

    records = []
    sel = [k for k, t in enumerate(times) if t < t0 - (2.0 * h) ** 2]
    for k in sel[1:-1]:
        st_prev, st_mid, st_next = run.snapshots[k - 1], run.snapshots[k], run.snapshots[k + 1]
        i_prev = _kernel_integral(st_prev, x0, t0, order).value
        i_next = _kernel_integral(st_next, x0, t0, order).value
        lhs = (i_next - i_prev) / (st_next.t - st_prev.t)
        rhs = -_deviation_integral(st_mid, x0, t0, order)
        records.append(
            {"t": st_mid.t, "lhs": lhs, "rhs": rhs, "residual": lhs - rhs}
        )
    return MonotonicityReport(
        x0=(float(x0[0]), float(x0[1])),
        t0=float(t0),
        r_grid=r_grid,
        theta_values=theta_vals,
        min_increment=float(inc),
        derivative_records=records,
    )


def rho_evolution_check(run, x0, t0, region=None, order=6):
    """Residual of the kernel's drift-diffusion identity along the flow.

    Material derivative of rho at tracked points versus
    -Delta rho - |H - (x0-x)^perp/2(t0-t)|^2 rho + H^2 rho, with the
    ambient derivatives of rho in closed form and the surface Laplacian
    through the curve's tangent and curvature.  Snapshots closer than
    4 h^2 to the kernel time are excluded (kernel blowup guard).
    """
    x0 = np.asarray(x0, dtype=float)
    h = run.snapshots[-1].curve.h
    times = run.times
    sel = [k for k, t in enumerate(times) if t0 - t >= 4.0 * h**2]
    if len(sel) < 3:
        raise DensityError("t0 too close to the run window")
    records = []
    for k in sel[1:-1]:
        st_prev, st, st_next = run.snapshots[k - 1], run.snapshots[k], run.snapshots[k + 1]
        pts = st.material
        if region is not None:
            c, rad = region
            inside = np.linalg.norm(pts - np.asarray(c, float), axis=1) <= rad
            if not inside.any():
                continue
        else:
            inside = np.ones(len(pts), dtype=bool)
        tau = t0 - st.t
        rho_prev = heat_kernel(x0, t0, st_prev.material[inside], st_prev.t)
        rho_next = heat_kernel(x0, t0, st_next.material[inside], st_next.t)
        lhs = (rho_next - rho_prev) / (st_next.t - st_prev.t)

        from .flow import _nearest_segments, _interp_at_segments

        idx, tp = _nearest_segments(st.curve, pts[inside])
        tang = _interp_at_segments(st.curve, st.curve.tangents, idx, tp)
        tang /= np.linalg.norm(tang, axis=1, keepdims=True)
        norm = geo.rot90(tang)
        kap = _interp_at_segments(st.curve, st.kappa, idx, tp)
        x = pts[inside]
        rho = heat_kernel(x0, t0, x, st.t)
        rho = np.atleast_1d(rho)
        u = x - x0
        ut = np.einsum("ij,ij->i", u, tang)
        un = np.einsum("ij,ij->i", u, norm)
        hess_tt = (-1.0 / (2.0 * tau) + ut**2 / (4.0 * tau**2)) * rho
        grad_n = -un / (2.0 * tau) * rho
        lap = hess_tt + kap * grad_n
        dev = (kap + un / (2.0 * tau)) ** 2 * rho
        rhs = -lap - dev + kap**2 * rho
        res = np.abs(lhs - rhs)
        records.append({"t": st.t, "residual": float(res.max())})
    return records


# -- sweeps -------------------------------------------------------------------


@dataclass
class Certificate:
    """Empirical uniform-density certificate over a family of flows."""

    s0: float
    delta0: float
    tau: float
    eps0: float
    K0: float
    max_theta: float
    argmax: dict
    empty: bool = False
    violator: dict = None

    def to_dict(self):
        return {
            "s0": self.s0,
            "delta0": self.delta0,
            "tau": self.tau,
            "eps0": self.eps0,
            "K0": self.K0,
            "max_theta": self.max_theta,
            "argmax": self.argmax,
            "empty": self.empty,
            "violator": self.violator,
        }


def _default_x0_grid():
    g = [(0.0, 0.0)]
    for rad in (0.25, 0.5, 0.9):
        for ang in np.linspace(0.0, 2.0 * np.pi, 6, endpoint=False):
            g.append((rad * np.cos(ang), rad * np.sin(ang)))
    return np.asarray(g)


def density_sweep(
    runs,
    eps0=0.05,
    x0_grid=None,
    tau_candidates=(1.0, 0.5, 0.25, 0.125),
    n_r=3,
    order=6,
):
    """Search the largest certified (delta0, tau) over a family of runs.

    ``runs`` maps the scale parameter s to its FlowRun.  For every run,
    snapshot time t, center x0 in the unit ball, and scale r with
    r^2 <= tau * t, the modified ratio must stay at or below 1 + eps0.
    delta0 is maximized first, tau breaks ties; K0 reports the
    far-field threshold of the annulus estimate.
    """
    if x0_grid is None:
        x0_grid = _default_x0_grid()
    queries = []  # (s, t, x0, r, theta)
    max_theta, argmax = -np.inf, {}
    for s, run in sorted(runs.items()):
        for st in run.snapshots:
            if st.t <= 0.0:
                continue
            guard = 2.0 * st.curve.h
            rmax = np.sqrt(max(tau_candidates) * st.t)
            if rmax < guard:
                continue
            r_list = [
                r
                for r in np.geomspace(max(guard, rmax / 4.0), rmax, n_r)
                if r >= guard
            ]
            for x0 in x0_grid:
                for r in r_list:
                    th = density_ratio(st.curve, x0, r, order=order).value
                    queries.append((s, st.t, tuple(x0), r, th))
                    if th > max_theta:
                        max_theta = th
                        argmax = {
                            "s": s,
                            "t": st.t,
                            "r": float(r),
                            "x0": [float(x0[0]), float(x0[1])],
                        }
    if not queries:
        return Certificate(0, 0, 0, eps0, np.inf, -np.inf, {}, empty=True)

    all_times = sorted({q[1] for q in queries})
    best = None
    for tau in tau_candidates:
        delta0 = 0.0
        for t_cap in all_times:
            bad = [
                q
                for q in queries
                if q[1] <= t_cap and q[3] ** 2 <= tau * q[1] + 1e-15 and q[4] > 1.0 + eps0
            ]
            if bad:
                break
            delta0 = t_cap
        if delta0 > 0 and (best is None or (delta0, tau) > (best[0], best[1])):
            best = (delta0, tau)
    if best is None:
        worst = max(queries, key=lambda q: q[4])
        return Certificate(
            0,
            0,
            0,
            eps0,
            np.inf,
            worst[4],
            argmax,
            empty=True,
            violator={
                "s": worst[0],
                "t": worst[1],
                "x0": list(worst[2]),
                "r": worst[3],
                "theta": worst[4],
            },
        )
    delta0, tau = best

    # far-field threshold: smallest K0 with Theta <= 1 + eps0 on the
    # annulus A(K0 sqrt(2t), 1) for r^2 <= t <= delta0
    K0 = np.inf
    for k0 in (1.0, 2.0, 4.0, 8.0):
        ok = True
        for s, t, x0, r, th in queries:
            if t > delta0 or r * r > t:
                continue
            d = np.hypot(*x0)
            if k0 * np.sqrt(2.0 * t) <= d <= 1.0 and th > 1.0 + eps0:
                ok = False
                break
        if ok:
            K0 = k0
            break

    cert_thetas = [
        q
        for q in queries
        if q[1] <= delta0 and q[3] ** 2 <= tau * q[1] + 1e-15
    ]
    cmax = max(cert_thetas, key=lambda q: q[4])
    return Certificate(
        s0=max(runs.keys()),
        delta0=float(delta0),
        tau=float(tau),
        eps0=eps0,
        K0=float(K0),
        max_theta=float(cmax[4]),
        argmax={
            "s": cmax[0],
            "t": cmax[1],
            "r": float(cmax[3]),
            "x0": list(cmax[2]),
        },
    )


def white_check(runs, certificate, ball_radius=0.5):
    """Empirical curvature constant sup |A| sqrt(t) over the certified window.

    For each run the supremum runs over snapshot times t <= delta0 and
    vertices inside the ball; passes when finite and uniform within a
    factor two across the family.
    """
    per_s = {}
    for s, run in sorted(runs.items()):
        c_emp = 0.0
        for st in run.snapshots:
            if st.t <= 0.0 or st.t > certificate.delta0:
                continue
            sel = st.curve.ball_mask((0.0, 0.0), ball_radius)
            if not sel.any():
                continue
            c_emp = max(c_emp, float(np.abs(st.kappa[sel]).max() * np.sqrt(st.t)))
        per_s[s] = c_emp
    vals = [v for v in per_s.values() if v > 0.0]
    uniform = bool(vals and max(vals) / max(min(vals), 1e-300) <= 2.0)
    return {"per_s": per_s, "C_emp": max(vals) if vals else 0.0, "uniform": uniform}
