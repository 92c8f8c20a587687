import json
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcsplit import pipeline
from mcsplit.config import load_config
from mcsplit.geometry import build_hierarchy
from mcsplit.media import FieldSpec, continua_by_threshold, generate_field

settings.register_profile("mcsplit", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mcsplit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_mesh():
    return build_hierarchy(20, 4)


def layered(mesh, contrast=1e4, thickness=(2, 1, 2)):
    """Low/high/low horizontal stripes (every block holds both values)."""
    spec = FieldSpec("stripes", [1.0, contrast, 1.0], {"thickness": list(thickness), "axis": "x2"})
    return generate_field(spec, mesh)


@pytest.fixture(scope="session")
def small_layered(small_mesh):
    field = layered(small_mesh)
    return field, continua_by_threshold(field, [100.0], small_mesh)


# ---------------------------------------------------------------------------
# desk-scale pipeline runs shared by the acceptance and long-horizon tests

DESK_STAGES = ("upscale", "split", "stability", "solve", "reference", "errors")


class DeskRun:
    def __init__(self, cfg, out, seconds):
        self.cfg, self.out, self.seconds = cfg, out, seconds

    def json(self, coarse_n, name):
        return json.loads((self.out / f"H{coarse_n}" / f"{name}.json").read_text())

    def csv(self, coarse_n, name):
        return np.loadtxt(self.out / f"H{coarse_n}" / f"{name}.csv", delimiter=",", skiprows=1, ndmin=2)


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk(desk_root):
    """``desk(preset, coarse_n=(10, 20))`` runs every stage once per session.

    ``seconds[coarse_n][stage]`` records wall time per stage.
    """
    runs = {}

    def get(preset, coarse_n=(10, 20)):
        key = (preset, tuple(coarse_n))
        if key not in runs:
            cfg = load_config(preset=preset, overrides={"mesh": {"coarse_n": list(coarse_n)}})
            out = desk_root / f"{preset}-{'-'.join(map(str, coarse_n))}"
            cache = desk_root / "cache"
            seconds = {}
            for cn in coarse_n:
                seconds[cn] = {}
                for stage in DESK_STAGES:
                    t0 = time.perf_counter()
                    fn = getattr(pipeline, f"stage_{stage}")
                    if stage in ("upscale", "stability"):
                        fn(cfg, cn, out, cache)
                    else:
                        fn(cfg, cn, out)
                    seconds[cn][stage] = time.perf_counter() - t0
            pipeline.stage_report(cfg, out)
            runs[key] = DeskRun(cfg, out, seconds)
        return runs[key]

    return get


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion

_CRITERIA: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        if hasattr(rep, "wasxfail"):
            state = "xfail" if rep.outcome == "skipped" else "XPASS"
        else:
            state = rep.outcome
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, state))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(s == "passed" for _, s in parts)
        bad = [f"{name} [{s}]" for name, s in parts if s != "passed"]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({len(parts)} checks"
        line += ")" if ok else "; " + ", ".join(bad) + ")"
        terminalreporter.write_line(line)
