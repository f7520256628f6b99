import numpy as np
import pytest

from lmcf import geometry as geo
from lmcf.flow import FlowRun, initial_state, run_flow
from lmcf.graphical import (
    EmptyCylinderError,
    MultiSheetError,
    PatchError,
    c1alpha_density_bound,
    calibrate_interior_constant,
    eta_evolution_check,
    extract_patch,
    graphical_persistence_check,
    interior_estimate_check,
)


class TestExtract:
    def test_line_patch_flat(self):
        ln = geo.line_arc(angle=0.3, h=0.02, half_length=4)
        p = extract_patch(ln, (0.5, 0.5 * np.tan(0.3)), 0.4)
        assert p.lipschitz < 1e-10
        assert np.abs(p.eta - 1.0).max() < 1e-12

    def test_circle_arc_lipschitz_closed_form(self):
        # an arc subtending 20 degrees is a graph over its chord with
        # maximal slope tan(10 degrees)
        c = geo.circle(1.0, h=0.004)
        half = np.radians(10.0)
        r = np.sin(half) * 1.02
        p = extract_patch(c, (np.cos(0.0), 0.0), r, direction=np.array([0.0, 1.0]))
        assert p.lipschitz == pytest.approx(np.tan(half), abs=2e-3)

    def test_node_neighborhood_multisheet(self, init):
        L = init.build_curve(h=0.03)
        with pytest.raises(MultiSheetError):
            extract_patch(L, (0.0, 0.0), 0.3)

    def test_empty_cylinder(self):
        c = geo.circle(1.0, h=0.02)
        with pytest.raises(EmptyCylinderError):
            extract_patch(c, (5.0, 5.0), 0.3)

    def test_radius_floor(self):
        c = geo.circle(1.0, h=0.05)
        with pytest.raises(PatchError):
            extract_patch(c, (1.0, 0.0), 0.1)

    def test_graph_curvature_matches_geometry(self):
        # |A|^2 = u''^2 / (1 + u'^2)^3 on a graph agrees with the
        # polyline curvature to O(h^2)
        c = geo.circle(1.0, h=0.005)
        p = extract_patch(c, (1.0, 0.0), 0.2)
        kg = np.abs(p.kappa_graph())
        interior = slice(3, -3)
        assert np.abs(kg[interior] - 1.0).max() < 5e-3


class TestPersistence:
    def test_static_line_limited_by_run_length(self):
        ln = geo.line_arc(angle=0.0, h=0.03, half_length=6)
        run = run_flow(initial_state(ln), T=0.05, dt=1e-3, snap_every=0.01)
        rec = graphical_persistence_check(run, (0.0, 0.0), [0.2, 0.5, 1.0])
        assert rec.delta == 1.0
        assert rec.eps < 1e-10

    def test_shrinking_circle_tracks_gradient_growth(self, circle_run):
        # graph over the tangent line at (0, 1): the closed-form circle
        # graph u(x, t) = sqrt(R(t)^2 - x^2) - 1 pins both the slope
        # delta / sqrt(R^2 - delta^2) and the height 1 - sqrt(R^2 -
        # delta^2) that gate persistence
        grid = [0.15, 0.25, 0.35, 0.45]
        cap = 0.5
        rec = graphical_persistence_check(circle_run, (0.0, 1.0), grid, eta_cap=cap)

        def ok(delta):
            R2 = 1.0 - 2.0 * min(delta**2, 0.2)
            w = np.sqrt(max(R2 - delta * delta, 1e-9))
            return (delta / w < cap) and (1.0 - w <= cap * delta)

        expected = max(d for d in grid if ok(d))
        assert rec.delta == expected


class TestEtaEvolution:
    def test_static_line_trivial(self):
        ln = geo.line_arc(angle=0.0, h=0.03, half_length=6)
        run = run_flow(initial_state(ln), T=0.04, dt=1e-3, snap_every=0.01)
        rep = eta_evolution_check(run, (0.0, 0.0), 0.5)
        assert abs(rep.min_residual) < 1e-10
        assert rep.eps_measured < 1e-18

    def test_nearly_flat_graph_holds_with_margin(self):
        # sine graph of small amplitude: the inequality holds with
        # O(eps^2) margin
        n = 301
        x = np.linspace(-3, 3, n)
        amp = 0.05
        v = np.stack([x, amp * np.sin(2 * x)], axis=1)
        curve = geo.PolyCurve(
            v, "arc", rays=(geo.AsymptoticRay(np.pi), geo.AsymptoticRay(0.0))
        )
        run = run_flow(initial_state(curve), T=0.02, dt=5e-4, snap_every=0.004)
        rep = eta_evolution_check(run, (0.0, 0.0), 1.0)
        assert rep.min_residual > -5e-3
        assert rep.eps_measured < 0.05

    def test_steep_patch_refused(self, circle_run):
        with pytest.raises(PatchError, match="determinant"):
            eta_evolution_check(circle_run, (0.0, 1.0), 0.45, eps_det=0.1)

    def test_glued_patch_conforms(self, glued_runs):
        s, run = max(glued_runs.items())
        center = 1.5 * np.array([np.cos(np.pi / 4), np.sin(np.pi / 4)])
        rep = eta_evolution_check(run, center, 0.4)
        st = run.snapshots[-1]
        assert rep.min_residual > -20.0 * (st.curve.h ** 2 + st.dt_last)


class TestInteriorEstimate:
    def test_static_line_trivially_passes(self):
        ln = geo.line_arc(angle=0.0, h=0.03, half_length=6)
        run = run_flow(initial_state(ln), T=0.04, dt=1e-3, snap_every=0.01)
        rep = interior_estimate_check(run, (0.0, 0.0), 0.5, c_const=1.0)
        assert rep.lhs < 1e-12
        assert rep.passed

    def test_circle_passes_with_calibrated_constant(self, circle_run):
        c_cal = calibrate_interior_constant([(circle_run, np.array([0.0, 1.0]), 0.3)])
        rep = interior_estimate_check(circle_run, (0.0, 1.0), 0.3, c_const=c_cal)
        assert rep.passed
        assert rep.lhs <= rep.bound_gradient

    def test_bounds_scale_covariantly(self, circle_run):
        # doubling the window halves |A| on a doubled circle flowed for
        # four times as long, and quarters the gradient bound
        big = run_flow(geo.circle(2.0, h=0.04), T=0.8, dt=1.6e-3, snap_every=0.04)
        small_rep = interior_estimate_check(circle_run, (0.0, 1.0), 0.3, c_const=1.0)
        big_rep = interior_estimate_check(big, (0.0, 2.0), 0.6, c_const=1.0)
        assert big_rep.lhs == pytest.approx(small_rep.lhs / 4.0, rel=0.05)
        assert big_rep.bound_gradient == pytest.approx(
            small_rep.bound_gradient / 4.0, rel=0.05
        )

    def test_glued_family_same_constant(self, glued_runs, circle_run):
        c_cal = calibrate_interior_constant([(circle_run, np.array([0.0, 1.0]), 0.3)])
        center = 1.5 * np.array([np.cos(np.pi / 4), np.sin(np.pi / 4)])
        for s, run in glued_runs.items():
            rep = interior_estimate_check(run, center, 0.45, c_const=c_cal)
            assert rep.passed


class TestDensityBound:
    def test_line_equal_to_reference(self):
        ln = geo.line_arc(angle=0.0, h=0.03, half_length=8)
        run = run_flow(initial_state(ln), T=0.05, dt=1e-3, snap_every=0.01)
        out = c1alpha_density_bound(run, ln, eps=0.1, R=3.0)
        # Theta is identically 1 for a static line: q1 = run length
        assert out["q1"] == pytest.approx(run.snapshots[-1].t)
        assert out["max_theta"] <= 1.0 + 1e-6

    def test_closeness_precondition_enforced(self):
        ln = geo.line_arc(angle=0.0, h=0.03, half_length=8)
        far = geo.line_arc(angle=0.0, h=0.03, half_length=8, offset=(0.0, 2.0))
        run = run_flow(initial_state(ln), T=0.02, dt=1e-3, snap_every=0.01)
        with pytest.raises(PatchError):
            c1alpha_density_bound(run, far, eps=0.05, R=3.0)

    def test_expander_window(self, expanders):
        # the flow of Sigma is self-similar; densities near it stay
        # below 1 + eps0 through the window
        arc = expanders.arcs[0]
        times = np.linspace(0.5, 0.58, 9)
        snaps = [
            initial_state(arc.polyline(h=0.01).scaled(np.sqrt(t / 0.5)), t0=t - 0.5)
            for t in times
        ]
        run = FlowRun(snaps, "time reached", h=0.01)
        out = c1alpha_density_bound(run, arc.polyline(h=0.01), eps=0.1, R=3.0)
        assert out["q1"] > 0.0
