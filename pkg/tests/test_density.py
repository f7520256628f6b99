import numpy as np
import pytest

from lmcf import geometry as geo
from lmcf.density import (
    Certificate,
    DensityError,
    density_ratio,
    density_sweep,
    heat_kernel,
    huisken_monotonicity_check,
    modified_density,
    plain_density,
    rescaled_identity_check,
    rho_evolution_check,
    white_check,
)
from lmcf.flow import FlowRun, initial_state, run_flow


class TestKernel:
    def test_normalization_at_center(self):
        val = heat_kernel((0.2, -0.1), 1.0 / (4 * np.pi), np.array([[0.2, -0.1]]), 0.0)
        assert val == pytest.approx(1.0, rel=1e-14)

    def test_one_sigma_value(self):
        tau = 0.37
        x = np.array([[2.0 * np.sqrt(tau), 0.0]])
        val = heat_kernel((0.0, 0.0), tau, x, 0.0)
        assert val == pytest.approx(np.exp(-1.0) / np.sqrt(4 * np.pi * tau), rel=1e-14)

    def test_requires_past_time(self):
        with pytest.raises(DensityError):
            heat_kernel((0, 0), 0.5, np.array([[0.0, 0.0]]), 0.5)

    def test_integrates_to_one_on_line(self):
        ln = geo.line_arc(angle=1.234, h=0.02, half_length=7, offset=(0.3, 0.1))
        x0 = np.array([0.3, 0.1]) + 1.3 * ln.rays[1].direction
        rep = density_ratio(ln, x0, 0.4)
        assert rep.value == pytest.approx(1.0, abs=1e-9)


class TestRatios:
    def test_plane_through_center_is_one(self):
        ln = geo.line_arc(angle=0.0, h=0.02, half_length=8)
        for r in (0.1, 0.5, 1.5):
            assert density_ratio(ln, (1.0, 0.0), r).value == pytest.approx(
                1.0, abs=1e-9
            )

    def test_transverse_pair_additivity(self):
        l1 = geo.line_arc(angle=np.pi / 4, h=0.02, half_length=8)
        l2 = geo.line_arc(angle=3 * np.pi / 4, h=0.02, half_length=8)
        total = density_ratio(l1, (0, 0), 0.5).value + density_ratio(
            l2, (0, 0), 0.5
        ).value
        assert total == pytest.approx(2.0, abs=2e-9)

    def test_offset_line_closed_form(self):
        d, r = 0.8, 0.45
        ln = geo.line_arc(angle=0.0, h=0.02, half_length=8, offset=(0.0, d))
        got = density_ratio(ln, (0.0, 0.0), r).value
        assert got == pytest.approx(np.exp(-d * d / (4 * r * r)), rel=1e-9)

    def test_resolution_guard_refuses(self):
        c = geo.circle(1.0, h=0.05)
        with pytest.raises(DensityError):
            density_ratio(c, (0.0, 0.0), 0.05)

    def test_quadrature_error_estimate(self):
        c = geo.circle(1.0, h=0.02)
        rep = density_ratio(c, (0.3, 0.2), 0.3)
        assert rep.quad_error < 1e-10


class TestHuisken:
    def test_static_line_both_sides_vanish(self):
        ln = geo.line_arc(angle=0.0, h=0.04, half_length=8)
        run = run_flow(initial_state(ln), T=0.06, dt=2e-3, snap_every=0.01)
        rep = huisken_monotonicity_check(run, (1.0, 0.0), 0.5)
        assert rep.max_residual < 1e-9
        assert np.abs(rep.theta_values - 1.0).max() < 1e-9

    def test_shrinking_circle_self_shrinker(self, circle_run):
        # the circle is the self-shrinker centred at extinction: the
        # ratio is constant in r with the closed-form value
        rep = huisken_monotonicity_check(circle_run, (0.0, 0.0), 0.5)
        want = np.sqrt(2.0 * np.pi / np.e)
        assert np.abs(rep.theta_values - want).max() < 2e-4
        assert rep.min_increment > -(1e-6 + 5.0 * (0.02**2 + circle_run.snapshots[-1].dt_last))

    def test_monotone_on_glued_run(self, glued_runs):
        s, run = max(glued_runs.items())
        st = run.snapshots[-1]
        slack = 1e-6 + 5.0 * (st.curve.h ** 2 + st.dt_last)
        rep = huisken_monotonicity_check(run, (0.2, 0.0), run.snapshots[-1].t)
        assert rep.min_increment > -slack

    def test_insufficient_snapshots(self, circle_run):
        with pytest.raises(DensityError):
            huisken_monotonicity_check(circle_run, (0.0, 0.0), 0.005)


class TestRescaling:
    def test_identity_machine_precision(self, glued_runs):
        rng = np.random.default_rng(0)
        s, run = min(glued_runs.items())
        worst = 0.0
        for _ in range(50):
            st = run.snapshots[int(rng.integers(1, len(run.snapshots)))]
            x0 = rng.uniform(-1, 1, size=2)
            r = float(rng.uniform(2.5 * st.curve.h, 1.0))
            worst = max(worst, rescaled_identity_check(st, s, x0, r))
        assert worst <= 1e-12

    def test_unit_scaling_trivial(self, circle_run):
        st = circle_run.snapshots[4]
        s = 0.5 - st.t  # makes sqrt(2(s+t)) = 1
        gap = rescaled_identity_check(st, s, (0.3, 0.1), 0.2)
        assert gap < 1e-15


class TestSweep:
    def test_certificate_on_glued_family(self, glued_runs, demo):
        cert = demo["manifest"].context["certificate"]
        assert not cert.empty
        assert cert.max_theta <= 1.05
        assert cert.delta0 > 0 and cert.tau > 0

    def test_fewer_queries_never_shrink_certificate(self, glued_runs):
        sub = {s: glued_runs[s] for s in list(sorted(glued_runs))[:2]}
        full = density_sweep(sub, eps0=0.05)
        coarse = density_sweep(sub, eps0=0.05, x0_grid=np.array([[0.0, 0.0]]))
        assert coarse.delta0 >= full.delta0
        assert coarse.tau >= full.tau

    def test_origin_on_static_pair_excluded(self):
        # the density of the pair at the origin is 2: this is exactly
        # why the surgery is needed
        l1 = geo.line_arc(angle=np.pi / 4, h=0.02, half_length=8)
        assert density_ratio(l1, (0, 0), 0.5).value * 2 == pytest.approx(2.0, abs=1e-8)


class TestWhite:
    def test_expander_flow_scaling_law(self, expanders):
        # |A| of sqrt(2t) Sigma is |A_Sigma| / sqrt(2t), so the
        # empirical constant equals sup |A_Sigma| / sqrt(2) exactly
        arc = expanders.arcs[0]
        snaps = []
        for t in np.linspace(0.2, 1.0, 9):
            c = arc.polyline(h=0.01).scaled(np.sqrt(2 * t))
            snaps.append(initial_state(c, t0=t))
        run = FlowRun(snaps, "time reached", h=0.01)
        cert = Certificate(0.0, 1.0, 0.5, 0.05, 1.0, 1.0, {})
        rep = white_check({0.0: run}, cert, ball_radius=2.0)
        want = expanders.kappa_max / np.sqrt(2.0)
        assert rep["C_emp"] == pytest.approx(want, rel=1e-2)

    def test_static_line_zero(self):
        ln = geo.line_arc(angle=0.0, h=0.04, half_length=6)
        run = run_flow(initial_state(ln), T=0.02, dt=1e-3, snap_every=0.01)
        cert = Certificate(0.0, 1.0, 0.5, 0.05, 1.0, 1.0, {})
        rep = white_check({0.0: run}, cert)
        assert rep["C_emp"] < 1e-10

    def test_uniform_over_family(self, glued_runs, demo):
        white = demo["manifest"].context["white"]
        assert white["uniform"]


class TestRhoEvolution:
    def test_static_line_residual_refines(self):
        # the residual carries O(h^2) space and O(snap^2) time-stencil
        # error; refine both together
        res = []
        for h, snap in ((0.04, 0.008), (0.02, 0.004)):
            ln = geo.line_arc(angle=0.0, h=h, half_length=8)
            run = run_flow(initial_state(ln), T=0.04, dt=1e-4, snap_every=snap)
            recs = rho_evolution_check(run, (0.5, 0.3), 0.5)
            res.append(max(r["residual"] for r in recs))
        assert res[0] / res[1] > 2.5 or res[1] < 1e-8

    def test_kernel_blowup_guard(self, circle_run):
        # t0 so close to the window start that the 4 h^2 guard leaves
        # fewer than three usable snapshots
        with pytest.raises(DensityError):
            rho_evolution_check(circle_run, (0.0, 0.0), 0.002)
