import numpy as np
import pytest

from models.Beckmann import (BeckmannField, RadialBeckmannProblem, beckmann_field, bump_density, bump_problem,
                             continuity_residual, interpolated_density, problem_from_spec, radial_flux,
                             uniform_density, verify_transport)
from models.RK2Flow import FlowSchedule, empirical_lipschitz
from utils.quadrature import polar_grid
from utils.verify import central_difference_jacobian

F_NU = 4.0 / np.pi


@pytest.fixture(scope='module')
def flat():
    return RadialBeckmannProblem(2, uniform_density(2), quadrature_n=64, name='flat')


def test_equal_densities_give_zero_flux(flat):
    assert radial_flux(flat, 0.25) == 0.0
    assert np.all(beckmann_field(flat, np.array([[0.1, 0.2], [0.3, -0.1]]), 0.5) == 0.0)
    assert continuity_residual(flat, 0.2, 0.5) < 1e-12


def test_bump_flux_matches_antiderivative(bump):
    r = 0.25
    expected = -(2.0 / np.pi) * (r / 2.0 - 2.0 * r ** 3)
    assert radial_flux(bump, r) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-0.059683, abs=1e-6)


def test_flux_vanishes_on_the_boundary_and_centre(bump):
    assert abs(radial_flux(bump, 0.5)) < 1e-10
    assert radial_flux(bump, 0.0) == 0.0
    with pytest.raises(ValueError):
        radial_flux(bump, 0.6)


def test_interpolated_density_endpoints(bump):
    r = np.array([0.0, 0.2, 0.4])
    np.testing.assert_allclose(interpolated_density(bump, r, 0.0), bump.f_nu(r))
    np.testing.assert_allclose(interpolated_density(bump, r, 1.0), bump.f_mu(r))
    assert interpolated_density(bump, 0.0, 0.5) == pytest.approx(F_NU * 1.25, rel=1e-14)


def test_field_vanishes_on_the_boundary(bump):
    angles = np.linspace(0.0, 2.0 * np.pi, 7)
    boundary = 0.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    assert np.max(np.abs(beckmann_field(bump, boundary, 0.3))) < 1e-9


def test_field_jacobian_matches_finite_differences(bump):
    points = np.array([[0.1, 0.05], [-0.2, 0.3], [0.0, -0.42], [0.33, 0.1]])
    jac = bump.field_jacobian(points, 0.4)
    fd = central_difference_jacobian(lambda p: bump.beckmann_field(p, 0.4), points)
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-8)


def test_continuity_residual_of_bump(bump):
    assert continuity_residual(bump, 0.2, 0.3) < 1e-6
    residuals = [continuity_residual(bump, r, 0.5) for r in np.linspace(0.01, 0.49, 100)]
    assert max(residuals) < 1e-6


def test_perturbed_flux_is_detected():
    defective = bump_problem(0.5, quadrature_n=256, flux_defect=0.1)
    # div(0.1 r x/|x|) = 0.1 d
    assert continuity_residual(defective, 0.2, 0.5) == pytest.approx(0.2, abs=1e-5)


def test_transport_kl_of_equal_densities_is_zero(flat):
    assert verify_transport(flat, FlowSchedule(4), grid_resolution=32).value < 1e-12


def test_transport_kl_of_bump():
    estimate = verify_transport(bump_problem(0.5), FlowSchedule(64), grid_resolution=256)
    assert estimate.value < 1e-4
    assert estimate.raw == pytest.approx(estimate.value, abs=1e-4)


def test_densities_must_be_normalized_and_positive():
    with pytest.raises(ValueError):
        RadialBeckmannProblem(2, lambda r: 2.0 * uniform_density(2)(r))
    with pytest.raises(ValueError):
        bump_problem(1.0)
    with pytest.raises(ValueError):
        problem_from_spec({'family': 'gaussian'})


def test_normalization_on_polar_grid(bump):
    points, weights = polar_grid(2, 256)
    radius = np.linalg.norm(points, axis=1)
    assert abs(np.sum(weights * bump.f_mu(radius)) - 1.0) < 1e-10
    assert abs(np.sum(weights * bump.f_nu(radius)) - 1.0) < 1e-10


def test_negentropy_and_radial_kl_match_grid_quadrature(bump):
    points, weights = polar_grid(2, 256)
    f_mu = bump_density(0.5)(np.linalg.norm(points, axis=1))
    assert bump.negentropy() == pytest.approx(np.sum(weights * f_mu * np.log(f_mu)), abs=1e-9)
    assert bump.radial_kl() == pytest.approx(np.sum(weights * f_mu * (np.log(f_mu) - np.log(F_NU))), abs=1e-9)


def test_target_samples_are_seeded_and_follow_the_target(bump):
    x = bump.sample_target(20000, seed=3)
    np.testing.assert_array_equal(x, bump.sample_target(20000, seed=3))
    assert np.all(np.linalg.norm(x, axis=1) < 0.5)
    points, weights = polar_grid(2, 128)
    r2 = np.sum(points ** 2, axis=1)
    expected = np.sum(weights * bump.f_mu(np.sqrt(r2)) * r2)
    assert np.mean(np.sum(x ** 2, axis=1)) == pytest.approx(expected, abs=2e-3)


def test_field_grid_export(bump):
    frame = bump.export_field_grid(t=0.5, n=21)
    assert list(frame.columns) == ['x_1', 'x_2', 't', 'xi_1', 'xi_2']
    assert np.all(np.hypot(frame['x_1'], frame['x_2']) <= 0.5)


def test_lipschitz_bound_dominates_probes(bump):
    field = BeckmannField(bump)
    assert empirical_lipschitz(field) <= field.lipschitz_bound() * (1.0 + 1e-6)


def test_field_speed_is_bounded_by_flux_over_kappa(bump):
    r = np.linspace(0.0, 0.5, 201)
    largest_flux = max(abs(radial_flux(bump, s)) for s in r)
    angles = np.linspace(0.0, 2.0 * np.pi, 9)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points = (r[:, None, None] * directions[None, :, :]).reshape(-1, 2)
    for t in np.linspace(0.0, 1.0, 6):
        speed = np.linalg.norm(beckmann_field(bump, points, t), axis=1)
        assert np.max(speed) <= largest_flux / bump.kappa + 1e-9


def test_transport_kl_does_not_grow_under_refinement(bump):
    kls = [verify_transport(bump, FlowSchedule(m), grid_resolution=256).value for m in (8, 16, 32)]
    for coarse, fine in zip(kls, kls[1:]):
        assert fine <= 1.1 * coarse + 1e-12
