import math

import numpy as np
import pytest

from socal.binning import BinSpec, assign_bin, build_bins
from socal.fitting import (
    Family,
    FitError,
    GammaPoissonObjective,
    fit_all_bins,
    fit_gamma_mml,
    fit_mixture_em,
)
from socal.kernels import get_backend
from socal.noise import NoiseModel
from socal.priors import GammaMixturePrior, GammaPrior, GaussianMixturePrior
from socal.simulate import CtrSimConfig, simulate_ctr

POISSON = NoiseModel.poisson()
GAUSSIAN = NoiseModel.gaussian()


def _gamma_poisson(rng, a, b, n_items, offset):
    theta = rng.gamma(a, 1.0 / b, n_items)
    n = np.full(n_items, float(offset))
    return rng.poisson(theta * n).astype(float), n


def test_recovers_gamma_parameters():
    y, n = _gamma_poisson(np.random.default_rng(7), 2.0, 4.0, 50_000, 200)
    fit = fit_gamma_mml(y, n)
    assert fit.converged and fit.status == "converged"
    assert fit.prior.shape == pytest.approx(2.0, rel=0.05)
    assert fit.prior.rate == pytest.approx(4.0, rel=0.05)
    assert np.isfinite(fit.loglik)


def test_single_zero_is_boundary():
    fit = fit_gamma_mml([0.0], [1.0], t_center=0.02)
    assert fit.status == "boundary" and not fit.converged
    assert fit.prior.shape == 0.5
    assert fit.prior.rate == pytest.approx(0.5 / (1e-2 * 0.02))


def test_rejects_bad_bins():
    with pytest.raises(FitError):
        fit_gamma_mml([], [])
    with pytest.raises(FitError):
        fit_gamma_mml([1.0], [0.0])
    with pytest.raises(FitError):
        fit_mixture_em([], [], GammaMixturePrior([1.0], [1.0], [1.0]), POISSON)


def test_refit_dominates_generating_parameters():
    rng = np.random.default_rng(8)
    y0, n0 = _gamma_poisson(rng, 2.0, 4.0, 20_000, 20)
    gen = fit_gamma_mml(y0, n0).prior
    n = rng.geometric(1 / 20, 100_000).astype(float)
    y = rng.poisson(rng.gamma(gen.shape, 1 / gen.rate, n.size) * n).astype(float)
    fit = fit_gamma_mml(y, n)
    ll_gen = GammaPoissonObjective(y, n)(np.log([gen.shape, gen.rate]), derivatives=False)
    assert fit.loglik >= ll_gen - 1e-6 * y.size


def test_gradient_vanishes_at_fit():
    rng = np.random.default_rng(9)
    n = rng.geometric(1 / 50, 30_000).astype(float)
    y = rng.poisson(rng.gamma(1.5, 1 / 30.0, n.size) * n).astype(float)
    fit = fit_gamma_mml(y, n)
    obj = GammaPoissonObjective(y, n)
    x = np.log([fit.prior.shape, fit.prior.rate])
    h = 1e-5
    grad = [
        (obj(x + h * e, derivatives=False) - obj(x - h * e, derivatives=False)) / (2 * h)
        for e in np.eye(2)
    ]
    assert np.linalg.norm(grad) < 1e-4 * y.size


def test_fit_is_permutation_invariant():
    rng = np.random.default_rng(10)
    n = rng.geometric(1 / 30, 20_000).astype(float)
    y = rng.poisson(rng.gamma(2.0, 1 / 50.0, n.size) * n).astype(float)
    base = fit_gamma_mml(y, n).prior
    for seed in (1, 2):
        p = np.random.default_rng(seed).permutation(n.size)
        again = fit_gamma_mml(y[p], n[p]).prior
        assert (again.shape, again.rate) == (base.shape, base.rate)


@pytest.mark.parametrize("name", ["python", "cython"])
def test_backends_agree(name):
    try:
        backend = get_backend(name)
    except ImportError:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(12)
    n = rng.geometric(1 / 30, 5000).astype(float)
    y = rng.poisson(rng.gamma(0.7, 1 / 20.0, n.size) * n).astype(float)
    ref = fit_gamma_mml(y, n, backend=get_backend("python")).prior
    fit = fit_gamma_mml(y, n, backend=backend).prior
    assert fit.shape == pytest.approx(ref.shape, rel=1e-9)
    assert fit.rate == pytest.approx(ref.rate, rel=1e-9)


def test_em_single_component():
    fit = fit_mixture_em([1.0, 2.0], [1.0, 1.0], GammaMixturePrior([2.0], [1.0], [1.0]), POISSON)
    assert np.array_equal(fit.prior.weights, [1.0])
    assert fit.iterations == 1


def test_em_duplicate_components():
    rng = np.random.default_rng(13)
    y, n = _gamma_poisson(rng, 2.0, 4.0, 500, 10)
    single = fit_mixture_em(y, n, GammaMixturePrior([2.0], [4.0], [1.0]), POISSON)
    dup = fit_mixture_em(y, n, GammaMixturePrior([2.0, 2.0], [4.0, 4.0], [0.3, 0.7]), POISSON)
    assert dup.prior.weights.sum() == pytest.approx(1.0, abs=1e-15)
    assert dup.loglik == pytest.approx(single.loglik, rel=1e-12)


def test_em_separated_components():
    rng = np.random.default_rng(14)
    k = 5000
    theta = np.concatenate([rng.gamma(50, 0.01 / 50, k), rng.gamma(50, 1.0 / 50, k)])
    n = np.full(theta.size, 1e3)
    y = rng.poisson(theta * n).astype(float)
    start = GammaMixturePrior([50, 50], [50 / 0.01, 50 / 1.0], [0.5, 0.5])
    fit = fit_mixture_em(y, n, start.with_weights([0.9, 0.1]), POISSON)
    assert np.allclose(fit.prior.weights, [0.5, 0.5], atol=0.02)


@pytest.mark.parametrize("noise", ["poisson", "gaussian"])
def test_em_loglik_nondecreasing(noise):
    rng = np.random.default_rng(15)
    if noise == "poisson":
        y, n = _gamma_poisson(rng, 1.0, 10.0, 2000, 40)
        prior = GammaMixturePrior(np.full(6, 3.0), 3.0 / np.geomspace(0.01, 1, 6), np.full(6, 1 / 6))
        model = POISSON
    else:
        n = np.full(2000, 1.0)
        y = rng.laplace(0, 1, n.size) + rng.standard_normal(n.size)
        prior = GaussianMixturePrior(np.linspace(-3, 3, 7), np.full(7, 0.5), np.full(7, 1 / 7))
        model = GAUSSIAN
    fit = fit_mixture_em(y, n, prior, model, max_iter=200)
    assert np.all(np.diff(fit.trace) >= -1e-9)
    assert fit.prior.weights.sum() == pytest.approx(1.0)


def _two_identical_bins():
    rng = np.random.default_rng(16)
    y, n = _gamma_poisson(rng, 2.0, 40.0, 3000, 30)
    t = np.concatenate([np.full(y.size, 0.01), np.full(y.size, 0.1)])
    return np.concatenate([y, y]), np.concatenate([n, n]), t, BinSpec([0.05])


def test_identical_bins_give_identical_fits():
    y, n, t, spec = _two_identical_bins()
    a, b = fit_all_bins(y, n, t, spec, Family("gamma"), POISSON)
    assert (a.prior.shape, a.prior.rate, a.loglik) == (b.prior.shape, b.prior.rate, b.loglik)
    assert (a.bin, b.bin) == (0, 1)


@pytest.mark.parametrize("family", ["gamma", "gamma-mixture:20"])
def test_parallel_matches_serial(family):
    items = simulate_ctr(CtrSimConfig(sigma=0.3, n_items=40_000, t_low=0.01, offset_mean=100, seed=3))
    spec = build_bins(items.t, 8)
    fam = Family.parse(family)
    serial = fit_all_bins(items.y, items.offset, items.t, spec, fam, POISSON)
    parallel = fit_all_bins(items.y, items.offset, items.t, spec, fam, POISSON, workers=3)
    for s, p in zip(serial, parallel):
        assert s == p


def test_failed_bin_is_recorded():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    n = np.array([1.0, 1.0, 1.0, 1.0])
    fits = fit_all_bins(y, n, np.array([1.0, 1.0, 3.0, 3.0]), BinSpec([2.0]), Family("gamma"), GAUSSIAN)
    assert all(f.status.startswith("failed") and f.prior is None for f in fits)


def test_bin_means_track_truth():
    config = CtrSimConfig(sigma=0.25, delta=0.0, n_items=1_000_000, t_low=0.01, t_high=0.1,
                          offset_mean=100, seed=4)
    items = simulate_ctr(config)
    spec = build_bins(items.t, 100)
    fits = fit_all_bins(items.y, items.offset, items.t, spec, Family("gamma"), POISSON, workers=4)
    bins = assign_bin(spec, items.t)
    checked = 0
    for fit in fits:
        in_bin = bins == fit.bin
        if in_bin.sum() < 10_000:
            continue
        truth = np.mean(items.t[in_bin]) * math.exp(config.delta + config.sigma**2 / 2)
        assert fit.prior.mean == pytest.approx(truth, rel=0.10)
        checked += 1
    assert checked >= 90


def test_family_parse():
    assert Family.parse("gamma") == Family("gamma", 1)
    assert Family.parse("gamma-mixture") == Family("gamma-mixture", 100)
    assert Family.parse("gaussian-mixture:5") == Family("gaussian-mixture", 5)
    assert str(Family.parse("gaussian-mixture:5")) == "gaussian-mixture:5"
    with pytest.raises(ValueError):
        Family.parse("beta")
