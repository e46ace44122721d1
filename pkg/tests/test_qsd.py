import math

import numpy as np
import pytest

from kinetic_exit.dynamics import SimConfig
from kinetic_exit.qsd import (
    DecayFit,
    ExtinctionError,
    InsufficientSampleError,
    WindowError,
    conditional_tv_decay,
    fleming_viot_run,
    lambda0_estimate,
    log_linear_fit,
    mirror_symmetry_test,
    phi_shape_scan,
    qsd_density_estimate,
    survival_regression,
)
from kinetic_exit.specfun import ModelParams, PhaseState

IBM_P = ModelParams()
CFG = SimConfig(dt=0.02, t_horizon=1.0, n_paths=100_000, seed=0)


@pytest.fixture(scope="module")
def fv_left():
    return fleming_viot_run(IBM_P, 10_000, 20.0, CFG, (0.2, 0.0), snapshot_every=0.1)


@pytest.fixture(scope="module")
def fv_right():
    return fleming_viot_run(IBM_P, 10_000, 20.0, CFG.replace(seed=1), (0.8, 0.0),
                            snapshot_every=0.1)


# --------------------------------------------------------------------------
# Fleming-Viot
# --------------------------------------------------------------------------

def test_fv_conservation(fv_left):
    assert all(s.n == 10_000 for s in fv_left.snapshots)
    assert fv_left.final.n == 10_000
    for s in fv_left.snapshots:
        assert np.all((s.q > 0) & (s.q < 1))
    kc = [s.kill_count for s in fv_left.snapshots]
    assert kc == sorted(kc)
    assert fv_left.final.kill_count == fv_left.kills.sum()


def test_fv_snapshots_in_window(fv_left):
    lo, hi = fv_left.window_bounds()
    assert lo == pytest.approx(15.0) and hi == pytest.approx(20.0)
    assert all(lo < s.time <= hi for s in fv_left.snapshots)
    assert len(fv_left.snapshots) == 50


def test_fv_rate_stationary(fv_left):
    assert fv_left.rate_drift() <= 0.05


def test_fv_init_independence(fv_left, fv_right):
    a, b = fv_left.stationary_rate(), fv_right.stationary_rate()
    assert abs(a.mean - b.mean) / b.mean <= 0.05


def test_fv_rate_near_regression(fv_left):
    fit = survival_regression(IBM_P, CFG)
    assert abs(fit.lambda0_hat - fv_left.stationary_rate().mean) / fit.lambda0_hat <= 0.05


def test_fv_deterministic():
    a = fleming_viot_run(IBM_P, 200, 1.0, CFG, (0.5, 0.0))
    b = fleming_viot_run(IBM_P, 200, 1.0, CFG, (0.5, 0.0))
    assert np.array_equal(a.kills, b.kills)
    assert np.array_equal(a.final.q, b.final.q)


def test_fv_init_forms():
    def uniform(rng, n):
        return rng.uniform(0.1, 0.9, n), rng.normal(size=n)

    for init in (PhaseState(0.5, 0.0), (np.full(100, 0.3), np.zeros(100)), uniform):
        run = fleming_viot_run(IBM_P, 100, 0.1, CFG, init)
        assert run.final.n == 100


def test_fv_errors():
    with pytest.raises(ValueError):
        fleming_viot_run(IBM_P, 50, 1.0, CFG, (0.5, 0.0))
    with pytest.raises(ValueError):
        fleming_viot_run(IBM_P, 100, 1.0, CFG, (1.2, 0.0))
    # every particle leaves within one huge macro-step
    with pytest.raises(ExtinctionError):
        fleming_viot_run(IBM_P, 100, 400.0, SimConfig(dt=200.0, t_horizon=200.0), (0.5, 0.0))


# --------------------------------------------------------------------------
# decay rate
# --------------------------------------------------------------------------

def test_log_linear_fit_exact():
    x = np.linspace(0, 3, 7)
    slope, intercept, r2 = log_linear_fit(x, 2.0 * np.exp(-1.5 * x))
    assert slope == pytest.approx(-1.5)
    assert intercept == pytest.approx(math.log(2.0))
    assert r2 == pytest.approx(1.0)


def test_decay_fit_invariants():
    with pytest.raises(ValueError):
        DecayFit(1.0, (2.0, 2.0), 1.0, 0.1)
    with pytest.raises(ValueError):
        DecayFit(-1.0, (1.0, 2.0), 1.0, 0.1)


def test_regression_positive_and_stable():
    a = survival_regression(IBM_P, CFG)
    b = survival_regression(IBM_P, CFG.replace(n_paths=200_000, seed=3))
    assert a.lambda0_hat > 0 and a.r2 > 0.99
    assert abs(a.lambda0_hat - b.lambda0_hat) / b.lambda0_hat <= 0.05


def test_regression_init_independence():
    a = survival_regression(IBM_P, CFG, init=(0.2, 0.0))
    b = survival_regression(IBM_P, CFG.replace(seed=4), init=(0.7, 0.5))
    assert abs(a.lambda0_hat - b.lambda0_hat) / b.lambda0_hat <= 0.05


def test_window_error():
    with pytest.raises(WindowError):
        survival_regression(IBM_P, CFG.replace(n_paths=1000), window=(5.0, 15.0))


def test_lambda0_estimate_reports_both():
    fit = lambda0_estimate(IBM_P, CFG, n_particles=2000, fv_t_max=8.0)
    assert fit.fv_rate is not None and fit.fv_stderr > 0
    assert fit.relative_gap <= 0.1


def test_sigma_changes_rate():
    a = survival_regression(IBM_P, CFG, window=(1, 3))
    b = survival_regression(ModelParams(sigma=2.0), CFG, window=(1, 3))
    assert b.lambda0_hat > a.lambda0_hat


# --------------------------------------------------------------------------
# QSD shape
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def shape(fv_left):
    return qsd_density_estimate(fv_left, IBM_P)


def test_density_normalized(shape):
    assert shape.density.sum() == pytest.approx(1.0)
    assert shape.envelope.sum() == pytest.approx(1.0)
    assert shape.populated.sum() > 100


def test_density_spread(shape):
    assert shape.spread <= 10


def test_mirror_symmetry(shape):
    stat, dof, pval, deff = mirror_symmetry_test(shape)
    assert dof > 100 and deff >= 1
    assert pval > 0.01


def test_mirror_detects_asymmetry(shape):
    skew = shape.counts * np.linspace(0.7, 1.3, shape.counts.shape[0])[:, None]
    tilted = type(shape)(skew, shape.batch_counts * np.linspace(0.7, 1.3, 50)[None, :, None],
                         shape.envelope, shape.q_edges, shape.p_edges, shape.min_hits)
    assert mirror_symmetry_test(tilted)[2] < 0.01


def test_mass_vanishes_toward_entrance(shape):
    # psi = 0 where particles enter: q = 0 with p > 0, and q = 1 with p < 0
    d = shape.density
    pos = (shape.p_edges[:-1] >= 0.5) & (shape.p_edges[1:] <= 2.0)
    neg = (shape.p_edges[1:] <= -0.5) & (shape.p_edges[:-1] >= -2.0)
    assert d[0, pos].sum() < d[1, pos].sum() < d[3, pos].sum()
    assert d[-1, neg].sum() < d[-2, neg].sum() < d[-4, neg].sum()
    # the exit side keeps mass at the wall
    assert d[0, neg].sum() > d[0, pos].sum()


def test_density_insufficient():
    run = fleming_viot_run(IBM_P, 100, 0.4, CFG, (0.5, 0.0))
    with pytest.raises(InsufficientSampleError):
        qsd_density_estimate(run, IBM_P)


# --------------------------------------------------------------------------
# conditional TV decay
# --------------------------------------------------------------------------

@pytest.mark.slow
def test_tv_decreases():
    pts = conditional_tv_decay(IBM_P, (0.2, 0.0), (0.8, 0.0), [1.0, 3.0],
                               CFG.replace(n_paths=1_000_000))
    assert pts[0].tv > pts[1].tv
    assert pts[0].tv > 10 * pts[0].noise_floor


@pytest.mark.slow
def test_tv_identical_inits_at_noise_floor():
    pts = conditional_tv_decay(IBM_P, (0.3, 0.5), (0.3, 0.5), [1.0, 2.0],
                               CFG.replace(n_paths=300_000))
    for pt in pts:
        assert pt.tv <= 3 * pt.noise_floor


def test_tv_checkpoint_validation():
    with pytest.raises(ValueError):
        conditional_tv_decay(IBM_P, (0.2, 0.0), (0.8, 0.0), [2.0, 1.0], CFG)


def test_tv_starvation():
    with pytest.raises(InsufficientSampleError):
        conditional_tv_decay(IBM_P, (0.2, 0.0), (0.8, 0.0), [1.0], CFG.replace(n_paths=5000))


# --------------------------------------------------------------------------
# principal eigenfunction shape
# --------------------------------------------------------------------------

def test_phi_shape_bounded():
    params = ModelParams(1.0, 0.5, 0.5, 1.0)
    grid = [(0.2, 0.0), (0.5, 0.0), (0.8, 0.0), (0.3, 1.0), (0.7, -1.0)]
    cfg = CFG.replace(n_paths=20_000)
    a = phi_shape_scan(params, 3.0, 1.0, grid, cfg)
    b = phi_shape_scan(params, 3.0, 1.0, grid, cfg, paths_offset=cfg.n_paths)
    assert 0 < a.ratio_min <= a.ratio_max < math.inf
    assert abs(a.spread - b.spread) / b.spread < 0.2
