import numpy as np
import pytest

from mixant.diffusion import (
    DiffusionSchedule,
    build_conditioning,
    ddim_sample,
    forward_diffuse,
    one_hot,
    reconstruction_loss,
    total_loss,
)
from mixant.errors import ConfigError, ScheduleError, ShapeError
from mixant.numerics import Rng


@pytest.fixture
def schedule():
    return DiffusionSchedule(1000, 1e-4, 0.02, 50)


def test_alpha_bar_is_strictly_decreasing_from_one(schedule):
    assert schedule.alpha_bar(0) == 1.0
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.betas[0] == 1e-4 and schedule.betas[-1] == 0.02
    assert 0 < schedule.alpha_bar(1000) < 1e-4


def test_ddim_timesteps(schedule):
    steps = schedule.ddim_timesteps(50)
    assert steps[0] == 1000 and steps[-1] == 0
    assert len(steps) == 51
    assert np.all(np.diff(steps) < 0)
    assert len(np.unique(schedule.ddim_timesteps(1000))) == 1001


def test_ddim_timesteps_out_of_range(schedule):
    with pytest.raises(ScheduleError):
        schedule.ddim_timesteps(1001)
    with pytest.raises(ScheduleError):
        schedule.ddim_timesteps(0)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        DiffusionSchedule(10, 0.02, 1e-4, 5)
    with pytest.raises(ScheduleError):
        DiffusionSchedule(10, 1e-4, 0.02, 11)


def test_forward_diffuse(schedule):
    y0 = one_hot([0, 1, 2], 3)
    noise = Rng(0, ("noise",)).normal(y0.shape)
    np.testing.assert_array_equal(forward_diffuse(y0, 0, noise, schedule), y0)
    a = schedule.alpha_bar(10)
    np.testing.assert_allclose(forward_diffuse(y0, 10, noise, schedule), np.sqrt(a) * y0 + np.sqrt(1 - a) * noise)
    with pytest.raises(ScheduleError):
        forward_diffuse(y0, 1001, noise, schedule)


def test_conditioning_pads_the_future_with_zeros():
    cond = build_conditioning(np.ones((3, 2)), 4)
    assert cond.features.shape == (7, 2)
    assert (cond.observed, cond.horizon, cond.length) == (3, 4, 7)
    np.testing.assert_array_equal(cond.features[3:], 0.0)
    with pytest.raises(ShapeError):
        build_conditioning(np.ones((0, 2)), 4)


def test_constant_oracle_is_returned_exactly(schedule):
    target = Rng(1, ("target",)).normal((7, 3))
    cond = build_conditioning(np.ones((3, 2)), 4)
    out = ddim_sample(lambda y, c, t: target, cond, schedule, 50, Rng(0, ("s",)), 3)
    assert np.array_equal(out, target)


def test_sampler_walks_the_timesteps_downwards(schedule):
    seen = []

    def denoise(y, cond, t):
        seen.append(t)
        return np.zeros_like(y)

    ddim_sample(denoise, build_conditioning(np.ones((2, 2)), 2), schedule, 10, Rng(0), 3)
    assert seen == list(schedule.ddim_timesteps(10)[:-1])


def test_sampler_is_deterministic_under_its_stream(schedule):
    cond = build_conditioning(np.ones((2, 2)), 2)

    def shrink(y, c, t):
        return 0.5 * y

    a = ddim_sample(shrink, cond, schedule, 20, Rng(4, ("s",)), 3)
    b = ddim_sample(shrink, cond, schedule, 20, Rng(4, ("s",)), 3)
    assert np.array_equal(a, b)


def test_different_seeds_give_different_samples(schedule):
    cond = build_conditioning(np.ones((2, 2)), 2)

    def shrink(y, c, t):
        return 0.5 * y

    a = ddim_sample(shrink, cond, schedule, 20, Rng(4, ("s",)), 3)
    b = ddim_sample(shrink, cond, schedule, 20, Rng(5, ("s",)), 3)
    assert not np.allclose(a, b)


def test_first_update_from_the_last_step_is_the_closed_form(schedule):
    cond = build_conditioning(np.ones((2, 2)), 3)
    seen = []

    def denoise(y, c, t):
        seen.append((t, y.copy()))
        return np.tanh(y)

    ddim_sample(denoise, cond, schedule, 2, Rng(9, ("s",)), 3)
    (t, y_T), (t_next, y_next) = seen
    assert (t, t_next) == (1000, 500)
    np.testing.assert_array_equal(y_T, Rng(9, ("s",)).normal((5, 3)))
    a, a_next = schedule.alpha_bar(1000), schedule.alpha_bar(500)
    x0 = np.tanh(y_T)
    eps = (y_T - np.sqrt(a) * x0) / np.sqrt(1 - a)
    np.testing.assert_allclose(y_next, np.sqrt(a_next) * x0 + np.sqrt(1 - a_next) * eps, rtol=0, atol=1e-12)


def test_forward_diffusion_moments(schedule):
    draws = 10_000
    y0 = np.tile(one_hot([0, 2], 3), (draws, 1, 1))
    noise = Rng(3, ("mc",)).normal(y0.shape)
    t = 300
    a = schedule.alpha_bar(t)
    y_t = forward_diffuse(y0, t, noise, schedule)
    # sampling error of the mean and variance estimates over `draws` draws
    mean_sigma = np.sqrt((1 - a) / draws)
    var_sigma = (1 - a) * np.sqrt(2.0 / (draws - 1))
    assert np.all(np.abs(y_t.mean(axis=0) - np.sqrt(a) * y0[0]) < 4 * mean_sigma)
    assert np.all(np.abs(y_t.var(axis=0, ddof=1) - (1 - a)) < 4 * var_sigma)


def test_reconstruction_loss_is_the_mean_squared_error():
    target = one_hot([0, 1], 2)
    assert reconstruction_loss(target, target).item() == 0.0
    assert reconstruction_loss(target, np.zeros((2, 2))).item() == 0.5
    with pytest.raises(ShapeError):
        reconstruction_loss(target, np.zeros((3, 2)))


def test_total_loss_mixes_with_lambda():
    assert total_loss(1.0, 2.0, 0.15).item() == pytest.approx(1.15, abs=1e-12)
    assert total_loss(0.25, 7.0, 0.0).item() == 0.25
    with pytest.raises(ConfigError):
        total_loss(1.0, 2.0, 1.0)
