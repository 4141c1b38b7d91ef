import logging

import numpy as np
import pandas as pd
import pytest
import tensorflow as tf

from models.FlowDensity import FlowDensityModel, TrainConfig
from models.ReQUNet import CutoffField, ReQUNetwork
from models.RK2Flow import FlowSchedule, GuardViolation, LinearField, push_forward
from utils.callbacks import LOG_COLUMNS, TrainingLogger
from utils.loaders import load_model
from utils.rng import make_rng, uniform_ball
from utils.verify import min_trajectory_preactivation

LOG_PI_OVER_4 = np.log(np.pi / 4.0)


def random_model(seed=0, widths=(8, 2), steps=8):
    return FlowDensityModel.build(2, list(widths), K=12, steps=steps, seed=seed, init_scale=0.5)


def weights_of(model):
    return [v.numpy().copy() for v in model.trainable_variables]


def test_zero_network_density_is_uniform(zero_model):
    x = uniform_ball(make_rng(0, 'data'), 50, 2)
    np.testing.assert_allclose(zero_model.model_logdensity(x), -LOG_PI_OVER_4, rtol=1e-15)
    assert zero_model.nll(x) == pytest.approx(LOG_PI_OVER_4, abs=1e-15)
    assert LOG_PI_OVER_4 == pytest.approx(-0.241564, abs=1e-6)


def test_nll_of_single_and_duplicated_samples():
    model = random_model(1)
    x = uniform_ball(make_rng(1, 'data'), 5, 2)
    single = model.nll(x[:1])
    assert single == pytest.approx(-float(model.model_logdensity(x[0])), rel=1e-14)
    assert model.nll(np.repeat(x, 3, axis=0)) == pytest.approx(model.nll(x), rel=1e-13)


def test_points_are_validated(zero_model):
    with pytest.raises(ValueError):
        zero_model.model_logdensity(np.array([[0.5, 0.0]]))
    with pytest.raises(ValueError):
        zero_model.model_logdensity(np.zeros((3, 3)))


def test_nll_gradient_matches_finite_differences(bump):
    rng = make_rng(11, 'verify')
    checked = 0
    while checked < 2:
        seed = int(rng.integers(2 ** 31))
        model = FlowDensityModel.build(2, [3, 3, 2], K=12, steps=4, seed=seed, init_scale=0.5)
        samples = bump.sample_target(6, seed)
        if min_trajectory_preactivation(model.field, model.schedule.steps, samples) < 1e-3:
            continue
        checked += 1
        exact = np.concatenate([g.ravel() for g in model.nll_gradient(samples)])
        fd = np.concatenate([g.ravel() for g in model.nll_gradient_fd(samples)])
        scale = np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)))
        assert np.max(np.abs(exact - fd) / scale) < 1e-4


def test_nll_gradient_ignores_sample_order():
    model = random_model(2)
    x = uniform_ball(make_rng(2, 'data'), 20, 2)
    forward = model.nll_gradient(x)
    backward = model.nll_gradient(x[::-1])
    for a, b in zip(forward, backward):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-15)


def test_zero_network_gradient_vanishes_inside_the_plateau(zero_model):
    # chi = 1 for |y| < 0.408 with K=12, k=4
    x = 0.7 * uniform_ball(make_rng(3, 'data'), 20, 2)
    for grad in zero_model.nll_gradient(x):
        np.testing.assert_allclose(grad, 0.0, atol=1e-14)


def test_zero_iterations_leave_parameters_unchanged(bump):
    model = random_model(4)
    before = weights_of(model)
    _, losses = model.train_erm(bump.sample_target(100, 4), TrainConfig(iterations=0))
    assert losses == []
    for a, b in zip(before, weights_of(model)):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_nll_on_bump_samples(bump):
    model = FlowDensityModel.build(2, [8, 2], K=12, steps=8, seed=5)
    _, losses = model.train_erm(bump.sample_target(500, 5), TrainConfig(learning_rate=0.05, iterations=20, seed=5))
    assert len(losses) == 20
    assert losses[-1] < losses[0]


def test_training_on_base_samples_stays_near_uniform(zero_model):
    x = uniform_ball(make_rng(6, 'data'), 500, 2)
    _, losses = zero_model.train_erm(x, TrainConfig(learning_rate=0.05, iterations=10, seed=6))
    assert abs(losses[-1] - LOG_PI_OVER_4) < 0.05


def test_minibatches_are_seeded(bump):
    x = bump.sample_target(200, 7)
    config = TrainConfig(learning_rate=0.05, iterations=5, batch_size=32, seed=7)
    _, first = random_model(7).train_erm(x, config)
    _, second = random_model(7).train_erm(x, config)
    assert first == second


def test_zero_network_samples_are_base_draws(zero_model):
    np.testing.assert_array_equal(zero_model.sample(100, seed=8), uniform_ball(make_rng(8, 'sample'), 100, 2))


def test_samples_map_back_to_base_draws():
    model = random_model(9)
    x = model.sample(200, seed=9)
    np.testing.assert_array_equal(x, model.sample(200, seed=9))
    assert np.all(np.linalg.norm(x, axis=1) < 0.5)
    z, _ = push_forward(model.field, model.schedule.steps, tf.constant(x))
    assert np.max(np.abs(z.numpy() - uniform_ball(make_rng(9, 'sample'), 200, 2))) < 1e-8


def test_kl_against_itself_vanishes():
    model = random_model(10)
    assert model.kl_estimate(model.model_logdensity, grid_resolution=64).value <= 2e-3


def test_zero_network_kl_is_the_radial_kl(zero_model, bump):
    estimate = zero_model.kl_estimate(bump.target_logdensity, grid_resolution=128)
    assert estimate.value == pytest.approx(bump.radial_kl(), abs=1e-8)


def test_density_integrates_to_one():
    assert abs(random_model(12).density_mass(grid_resolution=256) - 1.0) < 2e-3


def test_erm_gap_of_zero_network(zero_model, bump):
    gap = zero_model.erm_gap(bump.target_logdensity, bump.negentropy(), bump.sample_target(50, 13))
    assert gap < 1e-8


def test_checkpoint_round_trip(tmp_path):
    model = random_model(14)
    model.save(str(tmp_path))
    x = uniform_ball(make_rng(14, 'data'), 30, 2)
    restored = load_model(str(tmp_path))
    assert restored.schedule == model.schedule
    np.testing.assert_allclose(restored.model_logdensity(x), model.model_logdensity(x), rtol=1e-14)

    other = random_model(15)
    other.load_weights(str(tmp_path / 'checkpoint.json'))
    np.testing.assert_allclose(other.model_logdensity(x), model.model_logdensity(x), rtol=1e-14)


def test_checkpoint_rejects_other_directions():
    checkpoint = random_model(16).to_checkpoint()
    checkpoint['direction'] = 'base_to_data'
    with pytest.raises(ValueError):
        FlowDensityModel.from_checkpoint(checkpoint)


def _tight_guard_model(bump):
    field = CutoffField(ReQUNetwork(2, [8, 2], seed=3, init_scale=0.5), K=12, k=4)
    x = bump.sample_target(100, 17)
    lipschitz = FlowDensityModel(field, FlowSchedule(1)).guard_lipschitz(x)
    # h * Lambda < Lambda / 5 first holds at m = 8
    return FlowDensityModel(field, FlowSchedule(1, guard_threshold=lipschitz / 5.0)), x


def test_guard_violation_halves_the_step(bump, caplog):
    model, x = _tight_guard_model(bump)
    with caplog.at_level(logging.WARNING, logger='models.FlowDensity'):
        model.train_erm(x, TrainConfig(learning_rate=1e-8, iterations=1))
    assert model.schedule.steps == 8
    halvings = [r for r in caplog.records if 'halving h' in r.getMessage()]
    assert len(halvings) == 3
    assert all(r.levelno == logging.WARNING for r in halvings)


def test_guard_violation_past_the_step_cap(bump, monkeypatch):
    model, x = _tight_guard_model(bump)
    monkeypatch.setattr('models.FlowDensity.MAX_STEPS', 2)
    with pytest.raises(GuardViolation):
        model.train_erm(x, TrainConfig(learning_rate=1e-8, iterations=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=-2)
    with pytest.raises(ValueError):
        TrainConfig(guard_mode='loose')
    with pytest.raises(ValueError):
        TrainConfig(optimiser='rmsprop')


def test_training_logger_prints_and_writes(zero_model, tmp_path, capsys):
    x = uniform_ball(make_rng(18, 'data'), 50, 2)
    logger = TrainingLogger(str(tmp_path), print_every_n_batches=1, seed=18)
    zero_model.train_erm(x, TrainConfig(iterations=2, seed=18), callbacks=[logger])

    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith('0 [nll: -0.241564]')
    assert len(printed) == 2

    path = tmp_path / 'training_log.csv'
    assert path.read_text().splitlines()[0] == '# schema_version=1 rng=philox4x64 seed=18'
    frame = pd.read_csv(path, comment='#')
    assert list(frame.columns) == LOG_COLUMNS
    assert list(frame['iter']) == [0, 1]
    assert frame['h'].iloc[0] == pytest.approx(1.0 / 8)


def test_erm_gap_shrinks_like_inverse_root_n(bump):
    model = random_model(20)
    negentropy = bump.negentropy()
    scaled = []
    for n in (100, 1000, 10000):
        gaps = [model.erm_gap(bump.target_logdensity, negentropy, bump.sample_target(n, seed))
                for seed in range(12)]
        scaled.append(np.sqrt(n) * np.sqrt(np.mean(np.square(gaps))))
    assert max(scaled) <= 3.0 * min(scaled)


@pytest.mark.parametrize('a, steps', [(0.8, 4), (-1.5, 8)])
def test_linear_field_logdensity_closed_form(a, steps):
    model = FlowDensityModel(LinearField([[a]]), FlowSchedule(steps))
    x = np.linspace(-0.45, 0.45, 7)[:, None]
    h = 1.0 / steps
    expected = model.log_base + steps * np.log(1.0 + h * a + 0.5 * h ** 2 * a ** 2)
    assert model.log_base == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(model.model_logdensity(x), expected, rtol=1e-13)


def test_short_adam_run_halves_kl_to_the_bump(bump):
    samples = bump.sample_target(2000, 21)
    model = FlowDensityModel.build(2, [6, 6, 2], K=12, steps=8, seed=21)
    _, losses = model.train_erm(samples, TrainConfig(learning_rate=0.01, iterations=300, seed=21, optimiser='adam'))
    assert losses[-1] < losses[0]
    assert model.kl_estimate(bump.target_logdensity, grid_resolution=128).value <= 0.5 * bump.radial_kl()


@pytest.mark.slow
def test_training_halves_kl_to_the_bump(bump):
    samples = bump.sample_target(2000, 19)
    model = FlowDensityModel.build(2, [16, 16, 2], K=12, steps=16, seed=19)
    model.train_erm(samples, TrainConfig(learning_rate=0.01, iterations=500, seed=19, optimiser='adam'))
    assert model.kl_estimate(bump.target_logdensity).value <= 0.5 * bump.radial_kl()
