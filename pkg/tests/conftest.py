import time

import numpy as np
import pytest

from lmcf import expander as expander_mod
from lmcf import flow as flow_mod
from lmcf import geometry as geo
from lmcf import gluing as gluing_mod
from lmcf import pipeline as pipeline_mod


@pytest.fixture(scope="session")
def pair():
    return expander_mod.LinePair(np.pi / 4, 3 * np.pi / 4, pairing=1)


@pytest.fixture(scope="session")
def expanders(pair):
    return expander_mod.solve(pair, tol=1e-8)


@pytest.fixture(scope="session")
def decay(expanders):
    return expander_mod.decay_fit(expanders)


@pytest.fixture(scope="session")
def init(pair):
    return gluing_mod.SingularInitial(pair)


@pytest.fixture(scope="session")
def glue_mid(init, expanders, decay):
    cfg = gluing_mod.GluingConfig(s=2.0**-6, r0=expanders.r0, b=decay.decay_b)
    return gluing_mod.glue(init, expanders, cfg, h=0.03)


@pytest.fixture(scope="session")
def circle_run():
    c = geo.circle(1.0, h=0.02)
    return flow_mod.run_flow(c, T=0.2, dt=0.02**2, snap_every=0.01)


@pytest.fixture(scope="session")
def demo(tmp_path_factory):
    """Full demo pipeline, run once; wall time recorded for the budget gate."""
    workdir = tmp_path_factory.mktemp("demo_pipeline")
    scenario = pipeline_mod.default_scenario()
    t0 = time.monotonic()
    manifest = pipeline_mod.pipeline(scenario, str(workdir))
    elapsed = time.monotonic() - t0
    return {
        "scenario": scenario,
        "manifest": manifest,
        "workdir": str(workdir),
        "elapsed": elapsed,
    }


@pytest.fixture(scope="session")
def glued_runs(demo):
    return demo["manifest"].context["runs"]
