import numpy as np
import pytest
import tensorflow as tf

from models.RK2Flow import (ConstantField, FlowSchedule, GuardViolation, InversionError, LinearField,
                            NonFiniteStateError, SmoothTestField, empirical_lipschitz, guard_step_size, integrate,
                            invert_flow, invert_step, liouville_logdet_reference, push_forward, rk2_step,
                            step_contracts, step_jacobian)
from utils.bounds import rk2_global_error_bound
from utils.rng import make_rng, uniform_ball
from utils.verify import away_from_kinks, central_difference_jacobian, guarded_schedule, random_cutoff_field

ZERO = ConstantField([0.0, 0.0])


def linear_step_matrix(A, h):
    return np.eye(len(A)) + h * A + 0.5 * h ** 2 * A @ A


def test_rk2_step_is_exact_for_constant_fields():
    a = np.array([0.3, -0.1])
    y = np.array([0.1, 0.2])
    np.testing.assert_allclose(rk2_step(ConstantField(a), 0.2, 0.05, y).numpy(), y + 0.05 * a, atol=1e-16)


def test_rk2_step_of_linear_field():
    A = np.array([[0.2, -0.5], [0.4, 0.1]])
    y = np.array([0.3, -0.2])
    np.testing.assert_allclose(rk2_step(LinearField(A), 0.0, 0.1, y).numpy(), linear_step_matrix(A, 0.1) @ y,
                               rtol=1e-14)
    assert float(rk2_step(LinearField([[1.0]]), 0.0, 0.1, np.array([1.0]))[0]) == pytest.approx(1.105, abs=1e-14)


def test_rk2_step_rejects_non_positive_h():
    with pytest.raises(ValueError):
        rk2_step(ZERO, 0.0, 0.0, np.zeros(2))


def test_step_jacobian_closed_forms():
    np.testing.assert_array_equal(step_jacobian(ZERO, 0.0, 0.1, np.array([0.1, 0.1])).numpy(), np.eye(2))
    A = np.array([[0.2, -0.5], [0.4, 0.1]])
    np.testing.assert_allclose(step_jacobian(LinearField(A), 0.0, 0.1, np.array([0.3, -0.2])).numpy(),
                               linear_step_matrix(A, 0.1), rtol=1e-14)


def test_step_jacobian_matches_finite_differences(random_field):
    t, h = 0.25, 1.0 / 16
    points = uniform_ball(make_rng(7, 'data'), 64, 2)
    points = away_from_kinks(random_field.network, points, t)
    mid = points + 0.5 * h * random_field(points, t).numpy()
    keep = np.ones(len(points), dtype=bool)
    for a in random_field.network.preactivations(mid, t + 0.5 * h):
        keep &= np.min(np.abs(a.numpy()), axis=1) >= 1e-3
    points = points[keep]
    assert len(points) > 5
    jac = step_jacobian(random_field, t, h, points).numpy()
    fd = central_difference_jacobian(lambda p: rk2_step(random_field, t, h, p).numpy(), points)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-6


def test_integrate_zero_field_keeps_points():
    y0 = uniform_ball(make_rng(0, 'data'), 10, 2)
    tape = integrate(ZERO, FlowSchedule(8), y0)
    for state in tape.states:
        np.testing.assert_array_equal(state, y0)
    np.testing.assert_array_equal(tape.logdet, 0.0)


def test_integrate_linear_field_closed_form():
    tape = integrate(LinearField([[1.0]]), FlowSchedule(10), np.array([[0.2]]))
    assert tape.endpoint[0, 0] == pytest.approx(1.105 ** 10 * 0.2, rel=1e-13)
    assert 1.105 ** 10 == pytest.approx(2.7140808, abs=1e-7)
    assert tape.logdet[0] == pytest.approx(10 * np.log(1.105), rel=1e-13)
    assert tape.logdet[0] == pytest.approx(0.9984508, abs=1e-7)


def test_integrate_stays_within_global_error_bound():
    y0 = 0.1
    tape = integrate(LinearField([[1.0]]), FlowSchedule(10), np.array([[y0]]))
    error = abs(tape.endpoint[0, 0] - np.e * y0)
    # |xi|_{C^2} over |y| <= 0.3: sup|y| + sup|D xi| = 0.3 + 1; D xi is constant
    assert np.log(error) <= rk2_global_error_bound(0.1, np.log(1.3), 0.0)


def test_integrate_detects_non_finite_states():
    with pytest.raises(NonFiniteStateError):
        integrate(ConstantField([np.inf]), FlowSchedule(4), np.array([[0.0]]), check_guard=False)


def test_trajectory_frame_columns():
    tape = integrate(LinearField(0.5 * np.eye(2)), FlowSchedule(4), uniform_ball(make_rng(1, 'data'), 3, 2))
    frame = tape.to_frame(point=1)
    assert list(frame.columns) == ['step', 't', 'y_1', 'y_2', 'logdet_increment', 'logdet_cum']
    assert len(frame) == 5
    assert frame['logdet_cum'].iloc[-1] == pytest.approx(tape.logdet[1], rel=1e-14)


def test_invert_step_closed_forms():
    y = np.array([0.2, -0.1])
    np.testing.assert_array_equal(invert_step(ZERO, 0.0, 0.1, y).numpy(), y)
    a = np.array([0.3, 0.4])
    np.testing.assert_allclose(invert_step(ConstantField(a), 0.0, 0.1, y).numpy(), y - 0.1 * a, atol=1e-15)


def test_invert_step_round_trip(random_field):
    h = 1.0 / 16
    x = uniform_ball(make_rng(2, 'data'), 100, 2)
    y = rk2_step(random_field, 0.5, h, x)
    back = invert_step(random_field, 0.5, h, y)
    assert np.max(np.abs(back.numpy() - x)) < 1e-10
    assert np.max(np.abs(rk2_step(random_field, 0.5, h, back).numpy() - y.numpy())) < 1e-10


def test_invert_flow_closed_forms():
    z = uniform_ball(make_rng(3, 'data'), 6, 2)
    np.testing.assert_array_equal(invert_flow(ZERO, FlowSchedule(4), z).numpy(), z)
    x = invert_flow(LinearField([[1.0]]), FlowSchedule(10), np.array([[1.105 ** 10]]))
    assert x.numpy()[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_round_trip_on_1000_points():
    field = random_cutoff_field(21)
    x = uniform_ball(make_rng(4, 'data'), 1000, 2)
    schedule = guarded_schedule(field, 16, x)
    z = integrate(field, schedule, x).endpoint
    assert np.max(np.abs(invert_flow(field, schedule, z).numpy() - x)) < 1e-8


def test_violated_guard_is_detected_and_inversion_fails():
    # h * Lambda = 2: four times the 1/2 threshold
    field = LinearField(16.0 * np.eye(2))
    schedule = FlowSchedule(8, guard_mode='formula')
    z = uniform_ball(make_rng(5, 'data'), 4, 2)
    with pytest.raises(GuardViolation):
        invert_flow(field, schedule, z)
    with pytest.raises(InversionError):
        invert_flow(field, schedule, z, check_guard=False)


def test_guard_step_size_examples():
    assert guard_step_size(0.02, 17.888)
    assert not guard_step_size(0.05, 17.888)
    assert guard_step_size(1.0, 1e-300)


def test_schedule_validation_and_refinement():
    with pytest.raises(ValueError):
        FlowSchedule(0)
    with pytest.raises(ValueError):
        FlowSchedule(4, guard_mode='optimistic')
    refined = FlowSchedule(4, guard_mode='formula').refined()
    assert (refined.steps, refined.guard_mode, refined.h) == (8, 'formula', 0.125)


def test_empirical_lipschitz_of_linear_field():
    A = np.array([[0.4, 0.3], [-0.2, 0.1]])
    assert empirical_lipschitz(LinearField(A)) == pytest.approx(np.linalg.norm(A, 2), rel=1e-12)


def test_liouville_reference_closed_forms():
    y0 = np.array([[0.1, 0.2]])
    assert float(liouville_logdet_reference(ZERO, y0, 16)[0]) == 0.0
    A = np.array([[0.5, 0.2], [-0.3, 0.4]])
    value = float(liouville_logdet_reference(LinearField(A), y0, 1000)[0])
    assert abs(value - np.trace(A)) < 1e-5
    with pytest.raises(ValueError):
        liouville_logdet_reference(ZERO, y0, 0)


def test_liouville_reference_matches_fine_endpoint_jacobian(random_field):
    y0 = uniform_ball(make_rng(6, 'data'), 4, 2)
    fine_m = 512
    reference = liouville_logdet_reference(random_field, y0, fine_m).numpy()
    fd = central_difference_jacobian(lambda p: push_forward(random_field, fine_m, tf.constant(p))[0].numpy(), y0,
                                     eps=1e-6)
    np.testing.assert_allclose(reference, np.linalg.slogdet(fd)[1], atol=1e-4)


def test_rk2_order_on_sine_modulated_field():
    field = LinearField([[1.0]], modulated=True)
    y0 = np.array([[0.3]])
    exact = field.exact_flow(y0)
    errors = [abs(integrate(field, FlowSchedule(m), y0).endpoint[0, 0] - exact[0, 0]) for m in (8, 16, 32, 64)]
    for coarse, fine in zip(errors[:-1], errors[1:]):
        assert 3.5 <= coarse / fine <= 4.5


def test_discrete_logdet_matches_endpoint_jacobian():
    field = random_cutoff_field(8)
    x = uniform_ball(make_rng(7, 'data'), 50, 2)
    _, logdet = push_forward(field, 32, tf.constant(x))
    fd = central_difference_jacobian(lambda p: push_forward(field, 32, tf.constant(p))[0].numpy(), x, eps=1e-6)
    assert np.max(np.abs(logdet.numpy() - np.linalg.slogdet(fd)[1])) < 1e-5


def test_liouville_gap_is_second_order():
    field = SmoothTestField()
    y0 = np.array([[0.3, 0.2]])
    reference = float(liouville_logdet_reference(field, y0, 4096)[0])
    steps = np.array([8, 16, 32, 64, 128])
    gaps = [abs(integrate(field, FlowSchedule(int(m)), y0).logdet[0] - reference) for m in steps]
    slope = np.polyfit(np.log(1.0 / steps), np.log(gaps), 1)[0]
    assert abs(slope - 2.0) <= 0.3


def test_invert_step_requires_a_contraction():
    y = np.array([[0.1, 0.2]])
    # h * Lambda = 2
    with pytest.raises(GuardViolation):
        invert_step(LinearField(16.0 * np.eye(2)), 0.0, 1.0 / 8, y)
    with pytest.raises(InversionError):
        invert_step(LinearField(16.0 * np.eye(2)), 0.0, 1.0 / 8, y, check_guard=False)
    # h * Lambda = 0.45 passes the flow guard but not the contraction condition
    assert guard_step_size(1.0 / 8, 3.6)
    assert not step_contracts(1.0 / 8, 3.6)
    with pytest.raises(GuardViolation):
        invert_step(LinearField(3.6 * np.eye(2)), 0.0, 1.0 / 8, y)
    assert step_contracts(1.0 / 8, 3.2)
    x = invert_step(LinearField(3.2 * np.eye(2)), 0.0, 1.0 / 8, y)
    np.testing.assert_allclose(x.numpy(), y / (1.0 + 0.4 + 0.08), atol=1e-11)


@pytest.mark.parametrize('seed', [31, 32, 33])
def test_cutoff_trajectories_stay_in_the_disc(seed):
    field = random_cutoff_field(seed, init_scale=1.0)
    angles = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = np.concatenate([0.499 * ring, 0.5 * ring, uniform_ball(make_rng(seed, 'data'), 200, 2)])
    schedule = guarded_schedule(field, 8, x).refined()
    states = integrate(field, schedule, x).states
    assert np.max(np.linalg.norm(states, axis=-1)) <= 0.5 + 1e-9
