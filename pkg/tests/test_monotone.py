import numpy as np
import pytest

from lmcf import geometry as geo
from lmcf.flow import FlowRun, initial_state, run_flow
from lmcf.monotone import (
    StabilityParams,
    alpha_gradient_identity,
    alpha_monotonicity_check,
    c1alpha_closeness,
    expander_deviation,
    proximity_check,
    stability_hypotheses_check,
    time_averaged_deviation,
    _merge_arcs,
)


def dilation_run(arc, times, h=0.01):
    """Analytic self-similar flow snapshots sqrt(2t) Sigma."""
    snaps = [initial_state(arc.polyline(h=h).scaled(np.sqrt(2 * t)), t0=t) for t in times]
    return FlowRun(snaps, "time reached", h=h)


class TestExpanderDeviation:
    def test_unit_circle_closed_form(self):
        # |H - x^perp| = 2 pointwise on the unit circle (this pins the
        # orientation conventions), so the integral is 4 * 2 pi
        c = geo.circle(1.0, h=0.01)
        val, sup = expander_deviation(c)
        assert val == pytest.approx(8.0 * np.pi, rel=1e-4)
        assert sup == pytest.approx(2.0, rel=1e-4)

    def test_line_through_origin_zero(self):
        ln = geo.line_arc(angle=0.7, h=0.02, half_length=6)
        val, sup = expander_deviation(ln)
        assert val < 1e-20
        assert sup < 1e-10

    def test_expander_deviation_refines_to_zero(self, expanders):
        # the discrete residual is stencil-limited; the squared
        # integral must fall like h^4 toward the solver level
        vals = []
        for h in (0.02, 0.01):
            c = expanders.arcs[0].polyline(h=h)
            vals.append(expander_deviation(c, radius=5.0)[0])
        assert vals[0] / vals[1] > 8.0
        assert vals[1] < 1e-8

    def test_wedge_concentrates_deviation(self, pair):
        # a corner parametrization of the pair is not an expander: the
        # deviation concentrates at the node and grows as 1/h
        h = 0.02
        t = np.arange(h, 3.0, h)[::-1]
        a = t[:, None] * np.array([np.cos(np.pi / 4 + np.pi), np.sin(np.pi / 4 + np.pi)])
        b = np.arange(0, 3.0, h)[:, None] * np.array(
            [np.cos(3 * np.pi / 4), np.sin(3 * np.pi / 4)]
        )
        wedge = geo.PolyCurve(
            np.vstack([a, b]), "arc", h=h,
            rays=(geo.AsymptoticRay(np.pi / 4), geo.AsymptoticRay(3 * np.pi / 4)),
        )
        val, _ = expander_deviation(wedge, radius=1.0)
        assert val > 10.0


class TestTimeAveraged:
    def test_static_line_zero(self):
        ln = geo.line_arc(angle=0.0, h=0.04, half_length=8)
        run = run_flow(initial_state(ln), T=0.04, dt=1e-3, snap_every=0.005)
        val = time_averaged_deviation(run, s=0.02, T=0.01, a=2.0, radius=5.0)
        assert val < 1e-12

    def test_self_similar_run_small(self, expanders):
        run = dilation_run(expanders.arcs[0], np.linspace(0.01, 0.04, 7), h=0.005)
        val = time_averaged_deviation(run, s=0.0, T=0.01, a=2.0, radius=4.0)
        assert val < 1e-6

    def test_decreases_along_glued_sweep(self, glued_runs):
        T = 0.01
        vals = [
            time_averaged_deviation(run, s, T=T, a=2.0, radius=4.0)
            for s, run in sorted(glued_runs.items(), reverse=True)
        ]
        # trend recorded: smaller surgery scale gives smaller deviation
        assert vals[-1] < vals[0]

    def test_window_guard(self, circle_run):
        with pytest.raises(ValueError):
            time_averaged_deviation(circle_run, 0.1, T=0.15, a=2.0, radius=2.0)


class TestAlphaMonotonicity:
    def test_zero_angle_line_trivial(self):
        ln = geo.line_arc(angle=0.0, h=0.04, half_length=8)
        run = run_flow(initial_state(ln), T=0.04, dt=1e-3, snap_every=0.005)
        recs = alpha_monotonicity_check(run)
        for r in recs:
            assert abs(r.lhs) < 1e-10
            assert abs(r.rhs) < 1e-10

    def test_expander_first_term_vanishes_at_half(self, expanders):
        # at t = 1/2 the dilation has 2 t H - x^perp = H - x^perp = 0
        # up to the solver residual
        arc = expanders.arcs[0]
        c = arc.polyline(h=0.01).scaled(1.0)
        kap, _ = geo.curvature(c)
        xn = np.einsum("ij,ij->i", c.vertices, c.normals)
        dev = (2 * 0.5 * kap - xn) ** 2
        mask = np.linalg.norm(c.vertices, axis=1) < 3.0
        assert dev[mask].max() < 1e-6

    def test_holds_on_glued_runs(self, glued_runs):
        for s, run in glued_runs.items():
            st = run.snapshots[-1]
            slack = 20.0 * (st.curve.h ** 2 + st.dt_last)
            recs = alpha_monotonicity_check(run)
            worst = max(r.residual for r in recs)
            assert worst <= slack

    def test_gradient_identity_refines(self, glue_mid):
        st = initial_state(glue_mid)
        assert alpha_gradient_identity(st) < 0.2


class TestProximity:
    def test_exact_pair_zero_distance(self, pair):
        from lmcf.gluing import SingularInitial

        init0 = SingularInitial(pair, cubic_c3=0.0)
        L = init0.build_curve(h=0.02)
        run = FlowRun([initial_state(L, t0=0.01)], "time reached", h=0.02)
        recs = proximity_check(run, s=0.02, pair=pair, nu=0.0)
        assert recs[0].c1_min < 1e-6

    def test_expander_bound_via_decay(self, pair, expanders, decay):
        # small time keeps the annulus (r1, (s+t)^(-1/8)) nonempty; the
        # rescaled slice is the expander itself
        run = dilation_run(expanders.arcs[0], [1e-3], h=0.01)
        recs = proximity_check(run, s=0.0, pair=pair, nu=0.0, r1=1.5)
        assert recs[0].n_points > 0
        # dist(y, P) <= C exp(-b |y|^2) from the tail fit propagates to
        # a finite C1 witness
        assert 0.0 < recs[0].c1_min < 10.0 * max(decay.decay_C, 1.0)

    def test_glued_family_uniform(self, glued_runs, pair):
        c1s = []
        for s, run in sorted(glued_runs.items()):
            sub = FlowRun(run.snapshots[:3], "time reached", h=run.h)
            recs = proximity_check(sub, s=s, pair=pair, nu=0.05)
            c1s.append(max(r.c1_min for r in recs))
        assert max(c1s) < np.inf
        assert max(c1s) <= 4.0 * max(min(c1s), 0.5)


class TestCloseness:
    def test_identical_curves_pass_every_eps(self):
        c = geo.circle(1.0, h=0.02)
        for eps in (0.5, 0.1, 0.05):
            rep = c1alpha_closeness(c, c, eps, window=((0, 0), 1.2))
            assert rep.passed and rep.worst_norm == 0.0

    def test_parallel_lines_monotone(self):
        ln0 = geo.line_arc(angle=0.0, h=0.02, half_length=4)
        flags = []
        for d in (0.01, 0.04, 0.07, 0.12, 0.2):
            lnd = geo.line_arc(angle=0.0, h=0.02, half_length=4, offset=(0, d))
            flags.append(c1alpha_closeness(ln0, lnd, 0.1, window=((0, 0), 2.0)).passed)
        assert flags[0] and not flags[-1]
        assert all(a >= b for a, b in zip(flags, flags[1:]))

    def test_monotone_in_eps(self):
        ln0 = geo.line_arc(angle=0.0, h=0.02, half_length=4)
        lnd = geo.line_arc(angle=0.0, h=0.02, half_length=4, offset=(0, 0.05))
        small = c1alpha_closeness(ln0, lnd, 0.06, window=((0, 0), 1.5)).passed
        large = c1alpha_closeness(ln0, lnd, 0.3, window=((0, 0), 1.5)).passed
        assert large >= small

    def test_rescaled_glued_close_to_expander(self, glue_mid, expanders):
        lam = np.sqrt(2.0 * glue_mid.s)
        rescaled = glue_mid.curve.scaled(1.0 / lam)
        sigma = _merge_arcs(expanders.polylines(h=0.02))
        rep = c1alpha_closeness(rescaled, sigma, eps=0.5, window=((0.0, 0.0), 3.0))
        assert rep.passed


class TestStability:
    def test_expander_itself_passes(self, expanders):
        pieces = expanders.polylines(h=0.01)
        params = StabilityParams(
            M=expanders.kappa_max + 1.0, eta=1e-3, nu=0.05, eps_close=0.2
        )
        rep = stability_hypotheses_check(pieces, expanders, params)
        assert rep.curvature_ok
        assert rep.density_ok
        assert rep.deviation_ok
        assert rep.structure_ok
        assert rep.closeness.passed

    def test_perturbed_expander(self, expanders):
        pieces = expanders.polylines(h=0.01)
        bumped = []
        for base in pieces:
            bump = 1e-3 * np.exp(
                -np.linalg.norm(base.vertices - base.vertices[100], axis=1) ** 2
            )
            bumped.append(
                geo.PolyCurve(
                    base.vertices + bump[:, None] * base.normals,
                    "arc",
                    h=base.h,
                    rays=base.rays,
                )
            )
        params = StabilityParams(
            M=expanders.kappa_max + 1.0, eta=1e-2, nu=0.05, eps_close=0.1
        )
        rep = stability_hypotheses_check(bumped, expanders, params)
        assert rep.curvature_ok and rep.density_ok and rep.structure_ok
        assert rep.deviation < 1e-2
        assert rep.closeness.passed

    def test_pair_fails_deviation_near_node(self, pair, expanders):
        # corner parametrization of the pair: hypothesis (iii) fails
        h = 0.02
        t = np.arange(h, 6.0, h)[::-1]
        a = t[:, None] * np.array([np.cos(5 * np.pi / 4), np.sin(5 * np.pi / 4)])
        b = np.arange(0, 6.0, h)[:, None] * np.array(
            [np.cos(3 * np.pi / 4), np.sin(3 * np.pi / 4)]
        )
        wedge = geo.PolyCurve(
            np.vstack([a, b]), "arc", h=h,
            rays=(geo.AsymptoticRay(np.pi / 4), geo.AsymptoticRay(3 * np.pi / 4)),
        )
        params = StabilityParams(eta=1e-3)
        rep = stability_hypotheses_check(wedge, expanders, params)
        assert not rep.deviation_ok
