import numpy as np
import pytest

from tpmixqr import MixtureParams, PanelDataset, QuantileConfig, UnitRecord, prepare, simulate


def make_template(N, T, m, p, seed=0, names=None):
    rng = np.random.default_rng(seed)
    units = [UnitRecord(f"u{i}", np.arange(T), np.ones(T), rng.normal(size=(T, m)),
                        rng.normal(size=(T, p))) for i in range(N)]
    nb = [f"s{j}" for j in range(m)]
    npos = [f"x{j}" for j in range(p)]
    return PanelDataset(units, nb, npos)


def random_params(rng, m, p, G, sigma=0.3, gap=2.0, zero_free=False):
    b0 = np.full(G, -30.0) if zero_free else rng.normal(-0.5, 0.5, G)
    gamma = np.zeros(m) if zero_free else rng.normal(0, 0.5, m)
    return MixtureParams(gamma, rng.normal(0, 0.5, p), sigma, b0, gap * np.arange(G),
                         np.full(G, 1.0 / G))


def simulated(params, N, T, tau, seed, template_seed=None):
    tmpl = make_template(N, T, params.gamma.size, params.beta.size,
                         seed if template_seed is None else template_seed)
    ds = simulate(params, tmpl, QuantileConfig(tau), seed=seed)
    return ds, prepare(ds)


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(11)
    params = random_params(rng, 2, 2, 2)
    ds, prep = simulated(params, 12, 3, 0.3, seed=5)
    return params, ds, prep, QuantileConfig(0.3)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        ok, line = mod.RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {line}")
