"""Command line entry points.

One argparse tree per spec surface; the umbrella command ``lmcf``
drives full scenario pipelines.  All commands exit 0 exactly when
their gates pass.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys

import numpy as np

from . import density as density_mod
from . import expander as expander_mod
from . import flow as flow_mod
from . import geometry as geo
from . import gluing as gluing_mod
from . import graphical as graphical_mod
from . import monotone as monotone_mod
from . import pipeline as pipeline_mod


def _parse_xy(text):
    x, y = text.split(",")
    return float(x), float(y)


def _parse_s_range(text):
    """Parse '2^-4..2^-10' or a comma list of floats."""
    if ".." in text:
        lo, hi = text.split("..")

        def as_exp(tok):
            if "^" in tok:
                base, e = tok.split("^")
                return float(base) ** float(e)
            return float(tok)

        a, b = as_exp(lo), as_exp(hi)
        k0 = int(round(np.log2(a)))
        k1 = int(round(np.log2(b)))
        step = -1 if k1 < k0 else 1
        return [2.0**k for k in range(k0, k1 + step, step)]
    return [float(tok) for tok in text.split(",")]


# -- expander ------------------------------------------------------------------


def expander_main(argv=None):
    p = argparse.ArgumentParser(prog="expander", description="solve self-expanders")
    sub = p.add_subparsers(dest="mode")
    solve_p = sub.add_parser("solve", help="solve one pair (default)")
    for q in (p, solve_p):
        q.add_argument("--phi1", type=float, default=np.pi / 4)
        q.add_argument("--phi2", type=float, default=3 * np.pi / 4)
        q.add_argument("--pairing", type=int, default=1, choices=(0, 1))
        q.add_argument("--tol", type=float, default=1e-8)
        q.add_argument("--out", default="arc.json")
    atlas_p = sub.add_parser("atlas", help="solve a grid of opening angles")
    atlas_p.add_argument("--alphas", required=True, help="comma list of angles (rad)")
    atlas_p.add_argument("--tol", type=float, default=1e-8)
    atlas_p.add_argument("--out", default="atlas.json")
    args = p.parse_args(argv)
    if args.mode == "atlas":
        rows = []
        for a in (float(t) for t in args.alphas.split(",")):
            pair = expander_mod.LinePair(0.0, a, pairing=0)
            es = expander_mod.solve(pair, tol=args.tol)
            fit = expander_mod.decay_fit(es)
            rows.append(
                {
                    "alpha": a,
                    "d": es.arcs[0].sol.d,
                    "residual_sup": es.residual_sup,
                    "decay_b": fit.decay_b,
                    "decay_C": fit.decay_C,
                    "r0": es.r0,
                }
            )
        with open(args.out, "w") as fh:
            json.dump({"atlas": rows}, fh, indent=1, sort_keys=True)
        print(f"atlas of {len(rows)} pairs -> {args.out}")
        return 0
    pair = expander_mod.LinePair(args.phi1, args.phi2, pairing=args.pairing)
    es = expander_mod.solve(pair, tol=args.tol)
    pipeline_mod.save_expander_set(es, args.out)
    print(
        f"solved: residual_sup={es.residual_sup:.3e} r0={es.r0:.4f} -> {args.out}"
    )
    return 0 if es.residual_sup <= args.tol else 1


# -- glue ----------------------------------------------------------------------


def _load_init(path, pair):
    with open(path) as fh:
        p = json.load(fh)
    return gluing_mod.SingularInitial(
        pair,
        cubic_c3=p.get("cubic_c3", 0.008),
        lobe_radius=p.get("lobe_radius", 5.0),
    )


def glue_main(argv=None):
    p = argparse.ArgumentParser(prog="glue", description="build glued family members")
    sub = p.add_subparsers(dest="mode")
    one = sub.add_parser("one", help="glue one scale (default)")
    for q in (p, one):
        q.add_argument("--init", required=False, help="initial condition JSON")
        q.add_argument("--arc", required=True, help="expander JSON")
        q.add_argument("--s", type=float, default=2**-6)
        q.add_argument("--h", type=float, default=0.03)
        q.add_argument("--out", default="Ls.json")
    sweep = sub.add_parser("sweep", help="glue a geometric scale grid")
    sweep.add_argument("--arc", required=True)
    sweep.add_argument("--init", required=False)
    sweep.add_argument("--s-geom", default="2^-4..2^-10")
    sweep.add_argument("--h", type=float, default=0.03)
    sweep.add_argument("--outdir", default=".")
    args = p.parse_args(argv)
    es = pipeline_mod.load_expander_set(args.arc)
    init = (
        _load_init(args.init, es.pair)
        if args.init
        else gluing_mod.SingularInitial(es.pair)
    )
    fit = expander_mod.decay_fit(es)
    if args.mode == "sweep":
        out = []
        for s in _parse_s_range(args.s_geom):
            cfg = gluing_mod.GluingConfig(s=s, r0=es.r0, b=fit.decay_b)
            res = gluing_mod.glue(init, es, cfg, h=args.h)
            path = os.path.join(args.outdir, f"Ls_{s:.8f}.json")
            pipeline_mod.save_glue_result(res, path)
            out.append(path)
            print(f"s={s:.6f}: seams<= {res.seams.max_jump:.2e} -> {path}")
        return 0
    cfg = gluing_mod.GluingConfig(s=args.s, r0=es.r0, b=fit.decay_b)
    res = gluing_mod.glue(init, es, cfg, h=args.h)
    pipeline_mod.save_glue_result(res, args.out)
    print(
        f"glued s={args.s}: n={res.curve.n} seam_max={res.seams.max_jump:.2e} "
        f"embedded={res.embedded} -> {args.out}"
    )
    return 0


# -- flow ----------------------------------------------------------------------


def _load_flow_start(path):
    with open(path) as fh:
        p = json.load(fh)
    curve = geo.PolyCurve(
        np.asarray(p["vertices"]),
        p.get("topology", "loop"),
        h=p.get("h", 0.0),
        rays=tuple(
            geo.AsymptoticRay(r["angle"], r["reach"]) for r in p.get("rays", [])
        ),
    )
    theta = np.asarray(p["theta"]) if "theta" in p else None
    beta = np.asarray(p["beta"]) if "beta" in p else None
    anchors = None
    if "anchors" in p and beta is not None:
        anchors = []
        for a in p["anchors"]:
            k = int(
                np.linalg.norm(
                    curve.vertices - np.asarray(a["point"]), axis=1
                ).argmin()
            )
            anchors.append(flow_mod.FieldAnchor(k, float(beta[k] + a["offset"])))
    return flow_mod.initial_state(curve, theta=theta, beta=beta, anchors=anchors), p


def flow_main(argv=None):
    p = argparse.ArgumentParser(prog="flow", description="curve shortening flow")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--snap-every", type=float, default=None)
    p.add_argument("--out", default="run")
    args = p.parse_args(argv)
    state, payload = _load_flow_start(args.infile)
    if args.h is not None and abs(args.h - state.curve.h) > 1e-12:
        state = flow_mod.resample_state(state, args.h)
    run = flow_mod.run_flow(
        state, T=args.T, snap_every=args.snap_every, s=payload.get("s", 0.0)
    )
    path = flow_mod.save_run(run, args.out)
    print(f"flowed to t={run.snapshots[-1].t:.4f} ({run.termination}) -> {path}")
    return 0 if run.termination == "time reached" else 1


# -- density -------------------------------------------------------------------


def density_main(argv=None):
    p = argparse.ArgumentParser(prog="density", description="Gaussian density checks")
    sub = p.add_subparsers(dest="mode", required=True)
    sweep = sub.add_parser("sweep")
    sweep.add_argument("--runs", nargs="+", required=True, help="run dirs or glob")
    sweep.add_argument("--eps0", type=float, default=0.05)
    sweep.add_argument("--out", default="cert.json")
    check = sub.add_parser("check")
    check.add_argument("--run", required=True)
    check.add_argument("--x0", type=_parse_xy, default=(0.0, 0.0))
    check.add_argument("--t0", type=float, required=True)
    args = p.parse_args(argv)
    if args.mode == "sweep":
        paths = []
        for item in args.runs:
            paths.extend(globmod.glob(item) if any(c in item for c in "*?[") else [item])
        runs = {}
        for d in sorted(paths):
            run = flow_mod.load_run(os.path.join(d, "run.json"))
            runs[run.s] = run
        cert = density_mod.density_sweep(runs, eps0=args.eps0)
        with open(args.out, "w") as fh:
            json.dump(cert.to_dict(), fh, indent=1, sort_keys=True)
        print(
            f"certificate: empty={cert.empty} delta0={cert.delta0} tau={cert.tau} "
            f"max_theta={cert.max_theta:.6f} -> {args.out}"
        )
        return 1 if cert.empty else 0
    run = flow_mod.load_run(os.path.join(args.run, "run.json"))
    rep = density_mod.huisken_monotonicity_check(run, args.x0, args.t0)
    print("r grid:", np.round(rep.r_grid, 5).tolist())
    print("theta :", np.round(rep.theta_values, 8).tolist())
    print(
        f"min increment {rep.min_increment:.3e}  max derivative residual "
        f"{rep.max_residual:.3e}"
    )
    return 0 if rep.min_increment > -1e-3 else 1


# -- verify (monotone) ---------------------------------------------------------


def verify_main(argv=None):
    p = argparse.ArgumentParser(prog="verify", description="monotonicity and stability")
    sub = p.add_subparsers(dest="mode", required=True)
    alpha = sub.add_parser("alpha")
    alpha.add_argument("--run", required=True)
    stab = sub.add_parser("stability")
    stab.add_argument("--curve", required=True)
    stab.add_argument("--expander", required=True)
    stab.add_argument("--eps", type=float, default=0.05)
    args = p.parse_args(argv)
    if args.mode == "alpha":
        run = flow_mod.load_run(os.path.join(args.run, "run.json"))
        recs = monotone_mod.alpha_monotonicity_check(run)
        h = run.snapshots[-1].curve.h
        dt = run.snapshots[-1].dt_last
        slack = 20.0 * (h * h + dt)
        worst = max(r.residual for r in recs)
        for r in recs:
            print(f"t={r.t:.5f} lhs={r.lhs:+.4e} rhs={r.rhs:+.4e}")
        print(f"worst residual {worst:.3e} vs slack {slack:.3e}")
        return 0 if worst <= slack else 1
    curve = geo.load_curve(args.curve)
    es = pipeline_mod.load_expander_set(args.expander)
    rep = monotone_mod.stability_hypotheses_check(
        curve, es, monotone_mod.StabilityParams(eps_close=args.eps)
    )
    print(
        json.dumps(
            {
                "curvature_ok": rep.curvature_ok,
                "density_ok": rep.density_ok,
                "deviation_ok": rep.deviation_ok,
                "structure_ok": rep.structure_ok,
                "closeness_pass": rep.closeness.passed,
            },
            indent=1,
            sort_keys=True,
        )
    )
    return 0 if rep.all_pass else 1


# -- graphical -----------------------------------------------------------------


def graphical_main(argv=None):
    p = argparse.ArgumentParser(prog="graphical", description="appendix estimates")
    sub = p.add_subparsers(dest="mode", required=True)
    check = sub.add_parser("check")
    check.add_argument("--run", required=True)
    check.add_argument("--center", type=_parse_xy, required=True)
    check.add_argument("--R", type=float, default=0.5)
    check.add_argument("--theta", type=float, default=0.5, dest="theta_frac")
    check.add_argument("--c", type=float, default=1.0)
    args = p.parse_args(argv)
    run = flow_mod.load_run(os.path.join(args.run, "run.json"))
    rep = graphical_mod.interior_estimate_check(
        run, args.center, args.R, theta_frac=args.theta_frac, c_const=args.c
    )
    print(
        json.dumps(
            {
                "lhs": rep.lhs,
                "bound_gradient": rep.bound_gradient,
                "bound_initial": rep.bound_initial,
                "passed": rep.passed,
            },
            indent=1,
            sort_keys=True,
        )
    )
    return 0 if rep.passed else 1


# -- umbrella ------------------------------------------------------------------


def main(argv=None):
    p = argparse.ArgumentParser(prog="lmcf", description="scenario pipelines")
    sub = p.add_subparsers(dest="mode", required=True)
    runp = sub.add_parser("run")
    runp.add_argument("scenario")
    runp.add_argument("--workdir", default=None)
    ver = sub.add_parser("verify")
    ver.add_argument("manifest")
    lim = sub.add_parser("limit")
    lim.add_argument("manifest")
    initp = sub.add_parser("init-scenario")
    initp.add_argument("--out", default="scenario.json")
    args = p.parse_args(argv)
    if args.mode == "init-scenario":
        pipeline_mod.save_scenario(pipeline_mod.default_scenario(), args.out)
        print(f"wrote default scenario -> {args.out}")
        return 0
    if args.mode == "run":
        scenario = pipeline_mod.load_scenario(args.scenario)
        workdir = args.workdir or f"{scenario.name}_out"
        manifest = pipeline_mod.pipeline(scenario, workdir)
        for stage, ok in manifest.passed.items():
            print(f"[{'pass' if ok else 'FAIL'}] {stage}")
        if manifest.halted_at:
            print(f"halted at stage: {manifest.halted_at}")
        return 0 if manifest.all_pass else 1
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    if args.mode == "verify":
        ok = not manifest["halted_at"] and all(manifest["passed"].values())
        for stage, flag in manifest["passed"].items():
            print(f"[{'pass' if flag else 'FAIL'}] {stage}")
        return 0 if ok else 1
    table = manifest["stages"].get("limit")
    if not table:
        print("manifest carries no limit study")
        return 1
    print(json.dumps(table, indent=1, sort_keys=True))
    return 0 if table["monotone_decreasing"] else 1


if __name__ == "__main__":
    sys.exit(main())
