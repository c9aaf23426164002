import numpy as np
import pytest
from scipy.special import expit

from tpmixqr import inference
from tpmixqr.almath import QuantileConfig
from tpmixqr.data import prepare, zero_fraction
from tpmixqr.em import FitError, FitOptions, MixtureParams, fit
from tpmixqr.inference import bootstrap_se, design_matrices, select_model, simulate

from conftest import make_template, random_params, simulated


def test_simulate_degenerate_mixture_and_saturated_link():
    tmpl = make_template(50, 3, 1, 1, seed=0)
    p = MixtureParams([0.0], [0.0], 0.5, [-2.0, -2.0], [0.0, 5.0], [1.0, 0.0])
    _, comp = simulate(p, tmpl, QuantileConfig(0.5), seed=1, return_components=True)
    assert np.all(comp == 0)
    p = MixtureParams([0.0], [0.0], 0.5, [15.0], [0.0], [1.0])
    ds = simulate(p, tmpl, QuantileConfig(0.5), seed=1)
    assert zero_fraction(ds) > 0.99


def test_simulate_copies_covariates_and_varies_with_seed():
    tmpl = make_template(20, 3, 1, 2, seed=0)
    p = random_params(np.random.default_rng(0), 1, 2, 2)
    a = simulate(p, tmpl, QuantileConfig(0.3), seed=1)
    b = simulate(p, tmpl, QuantileConfig(0.3), seed=2)
    c = simulate(p, tmpl, QuantileConfig(0.3), seed=1)
    np.testing.assert_array_equal(a.outcomes(), c.outcomes())
    assert not np.array_equal(a.outcomes(), b.outcomes())
    for u, v in zip(a.units, b.units):
        np.testing.assert_array_equal(u.x, v.x)
        np.testing.assert_array_equal(u.s, v.s)


@pytest.mark.parametrize("tau", [0.2, 0.5, 0.85])
def test_simulated_positive_part_has_tau_quantile_at_location(tau):
    tmpl = make_template(4000, 5, 1, 2, seed=1)
    p = MixtureParams([0.2], [0.5, -0.3], 0.4, [-1.0, -1.0], [0.0, 3.0], [0.5, 0.5])
    ds, comp = simulate(p, tmpl, QuantileConfig(tau), seed=3, return_components=True)
    prep = prepare(ds)
    k = comp[prep.unit_index]
    mu = prep.X @ p.beta + p.b1[k]
    below = (prep.y_log < mu)[prep.pos]
    se = np.sqrt(tau * (1 - tau) / below.size)
    assert abs(below.mean() - tau) < 4 * se


def test_zero_fraction_matches_model_probability():
    tmpl = make_template(3000, 4, 2, 1, seed=2)
    p = MixtureParams([0.4, -0.6], [0.1], 0.5, [-1.0, 0.5], [0.0, 2.0], [0.3, 0.7])
    ds = simulate(p, tmpl, QuantileConfig(0.5), seed=4)
    S, _, _ = design_matrices(tmpl)
    expected = np.mean(sum(p.pi[k] * expit(S @ p.gamma + p.b0[k]) for k in range(2)))
    se = np.sqrt(expected * (1 - expected) / S.shape[0])
    # unit-level clustering inflates the variance, hence the wide band
    assert abs(zero_fraction(ds) - expected) < 10 * se


@pytest.fixture(scope="module")
def fitted():
    p = MixtureParams([0.3], [0.6, -0.4], 0.3, [-1.0, 0.0], [0.0, 2.5], [0.4, 0.6])
    ds, prep = simulated(p, 120, 4, 0.5, seed=13)
    res = fit(prep, QuantileConfig(0.5), 2, n_starts=3)
    return ds, prep, res


def test_bootstrap_precondition_and_shapes(fitted):
    ds, _, res = fitted
    with pytest.raises(ValueError):
        bootstrap_se(res, ds, QuantileConfig(0.5), n_replicates=1)
    boot = bootstrap_se(res, ds, QuantileConfig(0.5), n_replicates=8, seed=2)
    assert boot.replicate_estimates.shape == (8 - boot.n_failed, res.params.to_vector().size)
    assert np.all(boot.se >= 0)
    assert set(boot.se_dict()) == set(res.params.parameter_names())


def test_bootstrap_label_permutation_invariance(fitted):
    ds, _, res = fitted
    cfg = QuantileConfig(0.5)
    a = bootstrap_se(res, ds, cfg, n_replicates=6, seed=5)
    swapped = type(res)(**{**res.__dict__, "params": res.params.permuted([1, 0])})
    b = bootstrap_se(swapped, ds, cfg, n_replicates=6, seed=5)
    np.testing.assert_array_equal(a.se, b.se)


def test_bootstrap_se_shrinks_with_noise(fitted):
    ds, prep, res = fitted
    cfg = QuantileConfig(0.5)
    tiny = type(res)(**{**res.__dict__,
                        "params": MixtureParams(res.params.gamma, res.params.beta, 1e-4,
                                                res.params.b0, res.params.b1,
                                                res.params.pi)})
    a = bootstrap_se(res, ds, cfg, n_replicates=6, seed=1)
    b = bootstrap_se(tiny, ds, cfg, n_replicates=6, seed=1)
    pos = slice(1, 3)  # slopes of the positive part
    assert np.all(b.se[pos] < 0.05 * a.se[pos])


def test_select_model_shape_and_flags(fitted):
    _, prep, _ = fitted
    table = select_model(prep, [0.25, 0.5], [1, 2], FitOptions(n_starts=2))
    assert len(table.rows) == 4
    for tau in (0.25, 0.5):
        rows = [r for r in table.rows if r.tau == tau]
        sel = [r for r in rows if r.selected]
        assert len(sel) == 1 and sel[0].bic == min(r.bic for r in rows)
        assert sel[0].G == 2
    with pytest.raises(ValueError):
        select_model(prep, [], [1])


def test_select_model_marks_failed_cells(fitted, monkeypatch):
    _, prep, _ = fitted
    real_fit = inference.fit

    def flaky(data, cfg, G, opts):
        if G == 2:
            raise FitError("forced")
        return real_fit(data, cfg, G, opts)

    monkeypatch.setattr(inference, "fit", flaky)
    table = select_model(prep, [0.5], [1, 2], FitOptions(n_starts=1))
    failed = [r for r in table.rows if r.failed]
    assert len(failed) == 1 and failed[0].G == 2 and "forced" in failed[0].error
    assert table.selected(0.5).G == 1
