"""Scenario orchestration: solve, glue, flow, verify, and persist.

A scenario pins every input of the demo study: the line pair, the
figure-eight recipe, the scale grid, flow resolution and horizon, and
the verification tolerances (versioned; reports cite the version they
were judged against).  The pipeline runs the stages in order

    expander -> initial curve -> glued family -> hypotheses
    -> flows -> density sweep -> monotone checks -> graphical checks
    -> limit study

and halts downstream stages when a gate fails, leaving the diagnostics
in the manifest.  Everything is deterministic given (scenario, seed):
reports are byte-identical across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import density as density_mod
from . import expander as expander_mod
from . import flow as flow_mod
from . import geometry as geo
from . import gluing as gluing_mod
from . import graphical as graphical_mod
from . import monotone as monotone_mod

TOLERANCES_V1 = {
    "version": 1,
    "expander_residual_sup": 1e-8,
    "seam_tangent_jump": 1e-6,
    "multistart_hausdorff": 1e-6,
    "decay_fit_quality": 0.99,
    "dilation_oracle_hausdorff": 1e-4,
    "circle_benchmark_rel": 1e-3,
    "rescaling_identity_rel": 1e-12,
    "density_monotonicity_base_slack": 1e-6,
    "density_monotonicity_grid_factor": 5.0,
    "alpha_slack_factor": 20.0,
    "hypothesis_constant_spread": 2.0,
    "white_uniformity_factor": 2.0,
    "limit_small_s_distance": 5e-3,
}


@dataclass
class Scenario:
    """Full input record of one pipeline study."""

    name: str = "demo"
    phi1: float = np.pi / 4.0
    phi2: float = 3.0 * np.pi / 4.0
    pairing: int = 1
    cubic_c3: float = 0.008
    lobe_radius: float = 5.0
    s_grid: tuple = tuple(2.0**-k for k in range(4, 9))
    hypothesis_s_grid: tuple = tuple(2.0**-k for k in range(4, 11))
    h_glue: float = 0.03
    T_flow: float = 0.04
    snap_every: float = 0.002
    eps0: float = 0.05
    expander_tol: float = 1e-8
    alpha_min: float = 0.1
    seed: int = 0
    tolerances_version: int = 1

    def validate(self):
        if any(s <= 0.0 for s in self.s_grid):
            raise ValueError("scale grid must be positive")
        pair = self.pair()  # raises when below alpha_min
        return pair

    def pair(self):
        return expander_mod.LinePair(
            self.phi1, self.phi2, pairing=self.pairing, alpha_min=self.alpha_min
        )

    def to_json(self):
        d = asdict(self)
        d["s_grid"] = list(self.s_grid)
        d["hypothesis_s_grid"] = list(self.hypothesis_s_grid)
        return d

    @classmethod
    def from_json(cls, payload):
        payload = dict(payload)
        for k in ("s_grid", "hypothesis_s_grid"):
            if k in payload:
                payload[k] = tuple(payload[k])
        return cls(**payload)

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_scenario(path):
    with open(path) as fh:
        return Scenario.from_json(json.load(fh))


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        json.dump(scenario.to_json(), fh, indent=1, sort_keys=True)


@dataclass
class RunManifest:
    scenario_hash: str
    tolerances_version: int
    stages: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    halted_at: str = ""
    context: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "scenario_hash": self.scenario_hash,
            "tolerances_version": self.tolerances_version,
            "stages": self.stages,
            "passed": self.passed,
            "halted_at": self.halted_at,
        }

    @property
    def all_pass(self):
        return not self.halted_at and all(self.passed.values())


def _workers():
    return max(1, int(os.environ.get("LMCF_WORKERS", "1")))


def _np_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_np_default)
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def save_expander_set(es, path):
    """Persist the solved expander: shooting parameters plus polylines.

    The dense solution is rebuilt deterministically from (psi, d, chi)
    on load, so the file stays small without losing seam accuracy.
    """
    sol = es.arcs[0].sol
    payload = {
        "phi1": es.pair.phi1,
        "phi2": es.pair.phi2,
        "pairing": es.pair.pairing,
        "alpha_min": es.pair.alpha_min,
        "psi": sol.psi,
        "d": sol.d,
        "chi": sol.chi,
        "r_cut": sol.r_cut,
        "r0": es.r0,
        "tol": es.tol,
        "residual_sup": es.residual_sup,
        "rotations": [a.rotation for a in es.arcs],
    }
    return _write_json(path, payload)


def load_expander_set(path):
    with open(path) as fh:
        p = json.load(fh)
    pair = expander_mod.LinePair(
        p["phi1"], p["phi2"], pairing=p["pairing"], alpha_min=p["alpha_min"]
    )
    return expander_mod.solve(pair, tol=p["tol"], r_cut=p["r_cut"], start=(p["d"], p["chi"]))


def save_glue_result(res, path):
    payload = {
        "s": res.s,
        "r0": res.cfg.r0,
        "b": res.cfg.b,
        "topology": res.curve.topology,
        "h": res.curve.h,
        "vertices": res.curve.vertices.tolist(),
        "theta": res.theta.tolist(),
        "beta": res.beta.tolist(),
        "beta_period": res.beta_period,
        "anchors": [
            {"point": a.point.tolist(), "offset": a.offset} for a in res.anchors
        ],
        "seams": {
            "inner": res.seams.inner_jumps,
            "outer": res.seams.outer_jumps,
        },
        "embedded": res.embedded,
    }
    return _write_json(path, payload)


def default_scenario():
    return Scenario()


# -- stages -------------------------------------------------------------------


def _stage_expander(scenario, outdir):
    pair = scenario.pair()
    es = expander_mod.solve(pair, tol=scenario.expander_tol)
    fit = expander_mod.decay_fit(es)
    path = save_expander_set(es, os.path.join(outdir, "expander.json"))
    report = {
        "residual_sup": es.residual_sup,
        "residual_fd": es.arcs[0].residual_fd,
        "r0": es.r0,
        "kappa_max": es.kappa_max,
        "decay_b": fit.decay_b,
        "decay_C": fit.decay_C,
        "fit_quality": fit.fit_quality,
    }
    tol = TOLERANCES_V1
    ok = (
        es.residual_sup <= tol["expander_residual_sup"]
        and fit.decay_b > 0.0
        and fit.fit_quality >= tol["decay_fit_quality"]
    )
    return es, fit, report, ok, path


def _glue_one(args):
    init, es, s, b, h = args
    cfg = gluing_mod.GluingConfig(s=s, r0=es.r0, b=b)
    return gluing_mod.glue(init, es, cfg, h=h)


def _stage_glue(scenario, es, fit, init, outdir):
    s_all = sorted(set(scenario.s_grid) | set(scenario.hypothesis_s_grid), reverse=True)
    tasks = [(init, es, s, fit.decay_b, scenario.h_glue) for s in s_all]
    if _workers() > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            results = list(pool.map(_glue_one, tasks))
    else:
        results = [_glue_one(t) for t in tasks]
    by_s = dict(zip(s_all, results))
    for s, res in by_s.items():
        save_glue_result(res, os.path.join(outdir, f"Ls_{s:.8f}.json"))
    seam_max = max(r.seams.max_jump for r in results)
    embedded = all(r.embedded for r in results)
    report = {
        "seam_max_jump": seam_max,
        "embedded": embedded,
        "s_grid": list(s_all),
    }
    ok = seam_max <= TOLERANCES_V1["seam_tangent_jump"] and embedded
    return by_s, report, ok


def _stage_hypotheses(scenario, by_s, es, init, outdir):
    family = [by_s[s] for s in sorted(scenario.hypothesis_s_grid, reverse=True)]
    rep = gluing_mod.check_hypotheses(family, es, init)
    path = _write_json(os.path.join(outdir, "hypotheses.json"), rep.to_dict())
    ok = rep.h1_pass and rep.h2_pass and rep.h3_pass and rep.h4_pass
    return rep, ok, path


def _flow_one(args):
    res, T, snap = args
    return flow_mod.run_flow(res, T=T, snap_every=snap, s=res.s)


def _stage_flows(scenario, by_s, outdir):
    tasks = [(by_s[s], scenario.T_flow, scenario.snap_every) for s in scenario.s_grid]
    if _workers() > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            runs = list(pool.map(_flow_one, tasks))
    else:
        runs = [_flow_one(t) for t in tasks]
    by_s_runs = dict(zip(scenario.s_grid, runs))
    for s, run in by_s_runs.items():
        flow_mod.save_run(run, os.path.join(outdir, f"run_s_{s:.8f}"))
    lengths_ok = all(
        all(
            a.curve.length > b.curve.length
            for a, b in zip(r.snapshots, r.snapshots[1:])
        )
        for r in runs
    )
    completed = all(r.termination == "time reached" for r in runs)
    report = {
        "terminations": {f"{s}": by_s_runs[s].termination for s in scenario.s_grid},
        "length_decreasing": lengths_ok,
    }
    return by_s_runs, report, completed and lengths_ok


def _stage_density(scenario, runs, outdir):
    cert = density_mod.density_sweep(runs, eps0=scenario.eps0)
    _write_json(os.path.join(outdir, "certificate.json"), cert.to_dict())
    rows = []
    for s, run in sorted(runs.items()):
        for st in run.snapshots:
            if st.t <= 0.0:
                continue
            rep = density_mod.density_ratio(
                st.curve, (0.0, 0.0), max(np.sqrt(st.t / 2.0), 2.1 * st.curve.h)
            )
            rows.append([s, st.t, rep.r, rep.value])
    _write_csv(
        os.path.join(outdir, "density_origin.csv"),
        ["s", "t", "r", "theta"],
        rows,
    )
    white = density_mod.white_check(runs, cert)
    _write_json(os.path.join(outdir, "white.json"), white)
    ok = (not cert.empty) and white["uniform"]
    report = {"certificate": cert.to_dict(), "white": white}
    return cert, white, report, ok


def _stage_monotone(scenario, runs, es, outdir):
    tol = TOLERANCES_V1
    alpha_rows = []
    worst_resid = -np.inf
    slack_max = 0.0
    for s, run in sorted(runs.items()):
        h = run.snapshots[-1].curve.h
        dt = run.snapshots[-1].dt_last
        slack = tol["alpha_slack_factor"] * (h * h + dt)
        slack_max = max(slack_max, slack)
        for rec in monotone_mod.alpha_monotonicity_check(run):
            alpha_rows.append([s, rec.t, rec.lhs, rec.rhs, rec.residual])
            worst_resid = max(worst_resid, rec.residual)
    _write_csv(
        os.path.join(outdir, "alpha_monotonicity.csv"),
        ["s", "t", "lhs", "rhs", "residual"],
        alpha_rows,
    )
    dev_trend = []
    for s, run in sorted(runs.items()):
        T = scenario.T_flow / 3.0
        val = monotone_mod.time_averaged_deviation(run, s, T, a=2.0, radius=4.0)
        dev_trend.append([s, val])
    _write_csv(
        os.path.join(outdir, "time_averaged_deviation.csv"), ["s", "value"], dev_trend
    )
    ok = worst_resid <= slack_max
    report = {
        "alpha_worst_residual": worst_resid,
        "alpha_slack": slack_max,
        "deviation_trend": dev_trend,
    }
    return report, ok


def _stage_graphical(scenario, runs, es, outdir):
    # calibrate on the shrinking circle, then require the same constant
    # to cover the glued runs
    circle = geo.circle(1.0, h=0.02)
    circle_run = flow_mod.run_flow(circle, T=0.18, dt=4e-4, snap_every=0.01)
    c_cal = graphical_mod.calibrate_interior_constant(
        [(circle_run, np.array([0.0, 1.0]), 0.3)]
    )
    reports = []
    ok = True
    center = 1.5 * np.array([np.cos(scenario.phi1), np.sin(scenario.phi1)])
    for s, run in sorted(runs.items()):
        rep = graphical_mod.interior_estimate_check(
            run, center, R=0.45, c_const=c_cal
        )
        reports.append(
            {
                "s": s,
                "lhs": rep.lhs,
                "bound_gradient": rep.bound_gradient,
                "bound_initial": rep.bound_initial,
                "passed": rep.passed,
            }
        )
        ok = ok and rep.passed
    payload = {"c_calibrated": c_cal, "interior": reports}
    _write_json(os.path.join(outdir, "graphical.json"), payload)
    return payload, ok


def limit_study(runs, initial_curve, t_star=None, exclude_radius=0.2):
    """Convergence table for the vanishing-scale limit.

    At a common time t* the pairwise Hausdorff distances between
    consecutive family members proxy a Cauchy sequence for the limit
    flow; for the smallest scale, the distance at the earliest positive
    time to the singular initial curve away from a ball at the origin
    proxies attainment of the initial data.
    """
    ss = sorted(runs.keys(), reverse=True)
    if t_star is None:
        t_star = runs[ss[0]].snapshots[-1].t / 2.0
    rows = []
    for s1, s2 in zip(ss, ss[1:]):
        c1 = runs[s1].nearest(t_star).curve
        c2 = runs[s2].nearest(t_star).curve
        d = geo.hausdorff_distance(c1, c2, window=((0.0, 0.0), 4.0))
        rows.append({"s_pair": [s1, s2], "t": t_star, "hausdorff": d})
    s_min = ss[-1]
    run = runs[s_min]
    early = None
    for st in run.snapshots[1:]:
        early = st
        break
    mask_curve = early.curve
    pts = mask_curve.vertices
    keep = np.linalg.norm(pts, axis=1) >= exclude_radius
    d_init = float(
        geo.polyline_distance(pts[keep], initial_curve).max()
    ) if keep.any() else 0.0
    distances = [r["hausdorff"] for r in rows]
    monotone = all(a >= b for a, b in zip(distances, distances[1:]))
    return {
        "t_star": t_star,
        "pairs": rows,
        "monotone_decreasing": monotone,
        "smallest_s": s_min,
        "early_time": early.t if early else None,
        "distance_to_initial": d_init,
    }


def _stage_limit(scenario, runs, init, outdir):
    L = init.build_curve(h=scenario.h_glue)
    table = limit_study(runs, L)
    _write_json(os.path.join(outdir, "limit_study.json"), table)
    ok = table["monotone_decreasing"] and (
        table["distance_to_initial"] <= TOLERANCES_V1["limit_small_s_distance"]
    )
    return table, ok


def pipeline(scenario, workdir):
    """Execute the full study; returns the manifest (also written to disk).

    Stage failures halt everything downstream; the manifest records
    where and why.  Outputs are deterministic for a fixed scenario.
    The returned manifest carries the in-memory stage objects on its
    ``context`` attribute for downstream studies.
    """
    os.makedirs(workdir, exist_ok=True)
    scenario.validate()
    manifest = RunManifest(
        scenario_hash=scenario.digest(),
        tolerances_version=scenario.tolerances_version,
    )
    manifest.context = {}
    save_scenario(scenario, os.path.join(workdir, "scenario.json"))

    def finish():
        _write_json(os.path.join(workdir, "manifest.json"), manifest.to_dict())
        return manifest

    es, fit, rep, ok, _ = _stage_expander(scenario, workdir)
    manifest.stages["expander"] = rep
    manifest.passed["expander"] = ok
    manifest.context["expanders"] = es
    manifest.context["decay"] = fit
    if not ok:
        manifest.halted_at = "expander"
        return finish()

    init = gluing_mod.SingularInitial(
        scenario.pair(), cubic_c3=scenario.cubic_c3, lobe_radius=scenario.lobe_radius
    )
    manifest.context["init"] = init
    by_s, rep, ok = _stage_glue(scenario, es, fit, init, workdir)
    manifest.stages["glue"] = rep
    manifest.passed["glue"] = ok
    manifest.context["glued"] = by_s
    if not ok:
        manifest.halted_at = "glue"
        return finish()

    hyp, ok, _ = _stage_hypotheses(scenario, by_s, es, init, workdir)
    manifest.stages["hypotheses"] = hyp.to_dict()["pass"]
    manifest.passed["hypotheses"] = ok
    manifest.context["hypotheses"] = hyp
    if not ok:
        manifest.halted_at = "hypotheses"
        return finish()

    runs, rep, ok = _stage_flows(scenario, by_s, workdir)
    manifest.stages["flows"] = rep
    manifest.passed["flows"] = ok
    manifest.context["runs"] = runs
    if not ok:
        manifest.halted_at = "flows"
        return finish()

    cert, white, rep, ok = _stage_density(scenario, runs, workdir)
    manifest.stages["density"] = rep
    manifest.passed["density"] = ok
    manifest.context["certificate"] = cert
    manifest.context["white"] = white
    if not ok:
        manifest.halted_at = "density"
        return finish()

    rep, ok = _stage_monotone(scenario, runs, es, workdir)
    manifest.stages["monotone"] = rep
    manifest.passed["monotone"] = ok
    if not ok:
        manifest.halted_at = "monotone"
        return finish()

    rep, ok = _stage_graphical(scenario, runs, es, workdir)
    manifest.stages["graphical"] = rep
    manifest.passed["graphical"] = ok
    if not ok:
        manifest.halted_at = "graphical"
        return finish()

    rep, ok = _stage_limit(scenario, runs, init, workdir)
    manifest.stages["limit"] = rep
    manifest.passed["limit"] = ok
    if not ok:
        manifest.halted_at = "limit"
    return finish()
