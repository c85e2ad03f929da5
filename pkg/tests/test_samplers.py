import json
from pathlib import Path

import numpy as np
import pytest

from latentdit.diffusion import NoiseSchedule
from latentdit.samplers import (SamplerConfig, ddim_step, dpm2_step, guidance_sweep, initial_noise, integrate,
                                lambda_midpoint_t, noise_rng, sample, select_guidance, sweep_rows, time_grid)

from _analytic import SCHEDULE, START, convergence_slope, exact_flow, gaussian_eps, terminal_error
from _toy import stage1_textures, textures_data

FIXTURE = Path(__file__).parent / "fixtures" / "guidance_fid_table.json"


def fixture_tables():
    doc = json.loads(FIXTURE.read_text())
    return {row: dict(zip(doc["ws"], vals)) for row, vals in doc["rows"].items()}


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="euler")
    with pytest.raises(ValueError):
        SamplerConfig(kind="dpm2", steps=1)
    with pytest.raises(ValueError):
        SamplerConfig(kind="ddim", steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance=-1)
    SamplerConfig(kind="ddim", steps=1)


@pytest.mark.parametrize("kind", ["ddim", "dpm2", "ddpm"])
def test_time_grid_endpoints_and_monotone(kind):
    ts = time_grid(SCHEDULE, kind, 20)
    assert ts[0] == 1000.0 and ts[-1] == 1.0 and len(ts) == 20
    assert np.all(np.diff(ts) < 0)


def test_dpm2_grid_uniform_in_log_snr():
    lam = SCHEDULE.lambda_(time_grid(SCHEDULE, "dpm2", 12))
    np.testing.assert_allclose(np.diff(lam), np.diff(lam)[0], rtol=1e-8)


def test_zero_model_ddim_telescopes():
    x_T = np.array([[1.5], [-0.3]])
    x0 = integrate(lambda x, t, c: np.zeros_like(x), x_T, None, SamplerConfig(kind="ddim", steps=37), SCHEDULE)
    np.testing.assert_allclose(x0, x_T / np.sqrt(SCHEDULE.alpha_bar[1000]), rtol=1e-10)


def test_dpm2_exact_for_constant_eps():
    x, c = np.array([0.7, -1.1]), np.array([0.3, 0.9])
    t_hi, t_lo = 800.0, 120.0
    got = dpm2_step(x, t_hi, t_lo, lambda z, t: c, SCHEDULE)
    a_hi, s_hi, a_lo, s_lo = (SCHEDULE.alpha(t_hi), SCHEDULE.sigma(t_hi), SCHEDULE.alpha(t_lo),
                              SCHEDULE.sigma(t_lo))
    # with constant noise the clean-sample estimate is constant, so the flow is closed form
    x0 = (x - s_hi * c) / a_hi
    np.testing.assert_allclose(got, a_lo * x0 + s_lo * c, rtol=1e-12)
    np.testing.assert_allclose(ddim_step(x, t_hi, t_lo, c, SCHEDULE), got, rtol=1e-12)


def test_dpm2_degenerate_interval():
    with pytest.raises(ValueError):
        dpm2_step(np.zeros(1), 100.0, 100.0, lambda z, t: z, SCHEDULE)
    with pytest.raises(ValueError):
        dpm2_step(np.zeros(1), 100.0, 200.0, lambda z, t: z, SCHEDULE)


@pytest.mark.parametrize("hi,lo", [(1000.0, 1.0), (500.0, 499.0), (37.5, 2.0)])
def test_lambda_midpoint_between_endpoints(hi, lo):
    assert lo < lambda_midpoint_t(SCHEDULE, hi, lo) < hi


def test_dpm2_second_order_on_gaussian_data():
    slope, errs = convergence_slope("dpm2")
    assert 1.7 <= slope <= 2.3, errs


def test_ddim_first_order_on_gaussian_data():
    slope, errs = convergence_slope("ddim")
    assert 0.8 <= slope <= 1.2, errs


def test_full_step_ddim_close_to_exact_flow():
    assert terminal_error("ddim", 1000) < 1e-2


@pytest.mark.xfail(strict=True, reason="first-order discretisation error at 1000 unit steps is ~2.8e-3")
def test_full_step_ddim_within_1e3_of_exact_flow():
    assert terminal_error("ddim", 1000) < 1e-3


def test_many_step_dpm2_matches_exact_flow():
    assert terminal_error("dpm2", 200) < 5e-4


def test_ddpm_marginal_matches_data():
    x_T = noise_rng(3, 9, 0).standard_normal((4000, 1))
    x0 = integrate(gaussian_eps, x_T, None, SamplerConfig(kind="ddpm", steps=100, seed=5), SCHEDULE)
    assert abs(x0.mean() - 0.0) < 0.05
    assert abs(x0.std() - 0.5) < 0.05


def test_noise_streams_are_keyed():
    a = noise_rng(1, 0, 0).standard_normal(3)
    assert np.array_equal(a, noise_rng(1, 0, 0).standard_normal(3))
    assert not np.array_equal(a, noise_rng(1, 1, 0).standard_normal(3))
    assert not np.array_equal(a, noise_rng(2, 0, 0).standard_normal(3))
    assert np.array_equal(initial_noise((2, 2), 4), initial_noise((2, 2), 4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_names_step():
    def bad(x, t, c):
        return np.full_like(x, np.inf) if t[0] < 500 else np.zeros_like(x)

    with pytest.raises(FloatingPointError, match="step"):
        sample(bad, None, (1, 1), SamplerConfig(kind="ddim", steps=10))


# guidance on the toy model -----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    model, _ = stage1_textures(0)
    _, grids = textures_data(0)
    return model, grids[:2, :1, :1]


@pytest.mark.parametrize("kind", ["ddim", "dpm2", "ddpm"])
def test_guidance_one_equals_conditional_sampling(toy, kind):
    model, cond = toy
    fn = model.eps_fn()
    cfg = SamplerConfig(kind=kind, steps=6, guidance=1.0, seed=11)
    guided = sample(fn, cond, model.latent_shape(2), cfg)
    plain = sample(lambda x, t, c: fn(x, t, cond), cond, model.latent_shape(2), cfg)
    assert np.array_equal(guided, plain)


def test_guidance_zero_equals_unconditional_sampling(toy):
    model, cond = toy
    fn = model.eps_fn()
    cfg = SamplerConfig(kind="dpm2", steps=6, guidance=0.0, seed=11)
    guided = sample(fn, cond, model.latent_shape(2), cfg)
    plain = sample(lambda x, t, c: fn(x, t, None), cond, model.latent_shape(2), cfg)
    assert np.array_equal(guided, plain)


def test_sampling_is_deterministic(toy):
    model, cond = toy
    cfg = SamplerConfig(kind="ddpm", steps=8, guidance=2.0, seed=3)
    a = sample(model.eps_fn(), cond, model.latent_shape(2), cfg)
    assert np.array_equal(a, sample(model.eps_fn(), cond, model.latent_shape(2), cfg))
    other = sample(model.eps_fn(), cond, model.latent_shape(2), SamplerConfig(kind="ddpm", steps=8, seed=4))
    assert not np.array_equal(a, other)


@pytest.mark.slow
def test_full_step_ddim_agrees_with_fine_dpm2_on_toy_model(toy):
    model, cond = toy
    shape = model.latent_shape(2)
    ddim = sample(model.eps_fn(), cond, shape, SamplerConfig(kind="ddim", steps=1000, seed=2))
    dpm = sample(model.eps_fn(), cond, shape, SamplerConfig(kind="dpm2", steps=500, seed=2))
    # relative to the sample scale; DDIM keeps a first-order error of ~2e-2 on latents of magnitude ~4
    assert np.max(np.abs(ddim - dpm)) / np.max(np.abs(dpm)) < 1e-2


# guidance selection ------------------------------------------------------------------------

def test_fixture_tables_argmin():
    tables = fixture_tables()
    assert select_guidance(tables["256"]) == 2
    assert select_guidance(tables["1024"]) == 1.2


def test_ties_go_to_smaller_w():
    assert select_guidance({2.0: 1.0, 0.5: 1.0, 1.0: 3.0}) == 0.5
    with pytest.raises(ValueError):
        select_guidance({})


def test_toy_sweep_table_is_complete():
    table, best = guidance_sweep(lambda w: w, lambda out: (out - 1.0) ** 2, [0.5, 1, 2])
    assert sorted(table) == [0.5, 1.0, 2.0] and best == 1.0
    assert [r["w"] for r in sweep_rows(table)] == [0.5, 1.0, 2.0]


def test_sweep_failure_names_w():
    def metric(out):
        if out == 2.0:
            raise ValueError("boom")
        return out

    with pytest.raises(RuntimeError, match="w=2"):
        guidance_sweep(lambda w: w, metric, [1, 2])
    with pytest.raises(ValueError):
        guidance_sweep(lambda w: w, float, [])
