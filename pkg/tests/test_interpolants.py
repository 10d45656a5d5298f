"""Interpolant constructions: Gramians, minimum-energy steering,
pole placement, and the two-phase Brockett steering.

Closed-form oracles used here:
  - double integrator Gramian over T=1: [[1/3, 1/2], [1/2, 1]]
  - canonical min-energy control for (0,0) -> (1,0): u(t) = 6 - 12t
  - scalar feedback loop decays like exp(-t)
  - Brockett phase-2 vertical displacement equals pi * c
"""

import numpy as np
import pytest

from ctrlflow.errors import (
    ConfigurationError,
    InfeasibleTargetError,
    UncontrollablePairError,
    UnstableGainError,
)
from ctrlflow.interpolants import (
    brockett_steer_pair,
    brockett_steer_pair_batch,
    equilibrium_control,
    feedback_steer_pair,
    gramian,
    min_energy_pair,
    min_energy_pair_batch,
    place_poles,
)
from ctrlflow.linalg import expm
from ctrlflow.ode import integrate_samples
from ctrlflow.systems import builtin_system

A_DI = np.array([[0.0, 1.0], [0.0, 0.0]])
B_DI = np.array([[0.0], [1.0]])


# ---------------------------------------------------------------------------
# gramian


def test_gramian_identity_pair():
    G = gramian(np.zeros((2, 2)), np.eye(2), T=1.0)
    assert np.allclose(G.W, np.eye(2), atol=1e-12)


def test_gramian_double_integrator_closed_form():
    G = gramian(A_DI, B_DI, T=1.0)
    expected = np.array([[1.0 / 3.0, 1.0 / 2.0], [1.0 / 2.0, 1.0]])
    assert np.abs(G.W - expected).max() <= 1e-8


def test_gramian_bilinear_in_B():
    G1 = gramian(A_DI, B_DI, T=1.0)
    G2 = gramian(A_DI, 2.0 * B_DI, T=1.0)
    assert np.allclose(G2.W, 4.0 * G1.W, rtol=1e-12)


def test_gramian_symmetric_positive_definite():
    G = gramian(A_DI, B_DI, T=2.0)
    assert np.abs(G.W - G.W.T).max() <= 1e-12
    assert np.linalg.eigvalsh(G.W).min() > 0.0


def test_gramian_dimension_errors():
    with pytest.raises(ConfigurationError):
        gramian(np.zeros((2, 3)), B_DI, T=1.0)
    with pytest.raises(ConfigurationError):
        gramian(A_DI, np.zeros((3, 1)), T=1.0)


# ---------------------------------------------------------------------------
# minimum-energy steering


def test_min_energy_single_integrator_constant_control():
    pair = min_energy_pair(
        np.zeros((2, 2)), np.eye(2), np.zeros(2), np.array([1.0, 0.0]), 1.0, 200
    )
    assert np.abs(pair.controls - np.array([1.0, 0.0])).max() <= 1e-10
    # straight-line states
    assert np.allclose(pair.states[:, 0], pair.t_grid, atol=1e-10)


def test_min_energy_canonical_control_formula():
    pair = min_energy_pair(A_DI, B_DI, np.zeros(2), np.array([1.0, 0.0]), 1.0, 2000)
    expected = 6.0 - 12.0 * pair.t_grid
    assert np.abs(pair.controls[:, 0] - expected).max() <= 1e-8


def test_min_energy_zero_displacement():
    x = np.array([0.7, -0.2])
    pair = min_energy_pair(np.zeros((2, 2)), np.eye(2), x, x, 1.0, 100)
    assert np.abs(pair.controls).max() <= 1e-12


def test_min_energy_random_pairs_terminal():
    rng = np.random.default_rng(21)
    x0s = rng.uniform(-1.0, 1.0, size=(100, 2))
    xTs = rng.uniform(-1.0, 1.0, size=(100, 2))
    pairs = min_energy_pair_batch(A_DI, B_DI, x0s, xTs, 1.0, 2000)
    errs = [np.linalg.norm(p.states[-1] - xT) for p, xT in zip(pairs, xTs)]
    assert max(errs) <= 1e-5


def test_min_energy_optimality_among_null_perturbations():
    # u* + v steers to the same endpoint whenever v has zero Gramian image;
    # its cost can only go up
    rng = np.random.default_rng(22)
    T, n_grid = 1.0, 2000
    x0 = np.array([0.3, -0.4])
    xT = np.array([-0.8, 0.5])
    pair = min_energy_pair(A_DI, B_DI, x0, xT, T, n_grid)
    t = pair.t_grid
    W = gramian(A_DI, B_DI, T).W
    base_cost = pair.control_energy()

    # reachability kernel of v: integral of exp(A(T-t)) B v(t) dt
    eAtB = np.stack([expm(A_DI * (T - ti)) @ B_DI for ti in t])  # (K+1, 2, 1)

    for _ in range(20):
        coeffs = rng.uniform(-2.0, 2.0, size=3)
        v0 = (
            coeffs[0] * np.sin(2.0 * np.pi * t)
            + coeffs[1] * np.cos(4.0 * np.pi * t)
            + coeffs[2] * t**2
        )[:, None]
        delta = np.stack(
            [integrate_samples(eAtB[:, i, 0] * v0[:, 0], t) for i in range(2)]
        )
        correction = np.einsum("kij,i->kj", eAtB, np.linalg.solve(W, delta))
        v = v0 - correction
        # endpoint displacement of v vanishes by construction
        resid = np.stack(
            [integrate_samples(eAtB[:, i, 0] * v[:, 0], t) for i in range(2)]
        )
        assert np.abs(resid).max() <= 1e-8
        perturbed = pair.controls + v
        cost = integrate_samples(np.sum(perturbed**2, axis=1), t)
        assert base_cost <= cost + 1e-8


def test_min_energy_uncontrollable_rejected():
    A = np.diag([1.0, 2.0])
    B = np.array([[1.0], [0.0]])
    with pytest.raises(UncontrollablePairError):
        min_energy_pair(A, B, np.zeros(2), np.ones(2), 1.0, 100)


# ---------------------------------------------------------------------------
# pole placement


def test_place_poles_double_integrator_closed_form():
    K = place_poles(A_DI, B_DI, [-1.0, -2.0])
    assert np.allclose(K, np.array([[-2.0, -3.0]]), atol=1e-9)


def test_place_poles_scalar():
    K = place_poles(np.zeros((1, 1)), np.ones((1, 1)), [-3.0])
    assert np.allclose(K, [[-3.0]], atol=1e-12)


def test_place_poles_spectrum_matches():
    from ctrlflow.systems import six_state_matrices

    A, B = six_state_matrices()
    poles = np.array([-2.0, -2.0, -2.0, -2.4, -2.4, -2.4])
    K = place_poles(A, B, poles, seed=1)
    eig = np.linalg.eigvals(A + B @ K)
    assert np.abs(np.sort(eig.real) - np.sort(poles)).max() <= 1e-6
    assert np.abs(eig.imag).max() <= 1e-6


def test_place_poles_multiplicity_capped_by_input_count():
    # the diagonalizable assignment cannot repeat a pole more often than m
    from ctrlflow.systems import six_state_matrices

    A, B = six_state_matrices()
    with pytest.raises(ConfigurationError):
        place_poles(A, B, [-2.0] * 6, seed=0)


def test_place_poles_complex_conjugate_pair():
    K = place_poles(A_DI, B_DI, [-1.0 + 1.0j, -1.0 - 1.0j])
    eig = np.linalg.eigvals(A_DI + B_DI @ K)
    assert np.allclose(np.sort_complex(eig), [-1.0 - 1.0j, -1.0 + 1.0j], atol=1e-6)


def test_place_poles_requires_conjugate_closure():
    with pytest.raises(ConfigurationError):
        place_poles(A_DI, B_DI, [-1.0 + 1.0j, -2.0])


def test_place_poles_uncontrollable():
    A = np.diag([1.0, 2.0])
    B = np.array([[1.0], [0.0]])
    with pytest.raises(UncontrollablePairError):
        place_poles(A, B, [-1.0, -2.0])


# ---------------------------------------------------------------------------
# feedback steering


def test_feedback_steer_scalar_decay():
    pair = feedback_steer_pair(
        np.zeros((1, 1)),
        np.ones((1, 1)),
        np.array([[-1.0]]),
        np.zeros(1),
        np.array([1.0]),
        T=5.0,
        n_grid=2000,
    )
    assert np.allclose(pair.states[:, 0], np.exp(-pair.t_grid), atol=1e-9)
    terminal = abs(pair.states[-1, 0])
    assert abs(terminal - np.exp(-5.0)) <= 1e-9


def test_feedback_steer_from_equilibrium_stays():
    K = place_poles(A_DI, B_DI, [-1.0, -2.0])
    y = np.array([2.0, 0.0])  # zero-velocity states are equilibria
    pair = feedback_steer_pair(A_DI, B_DI, K, y, y, T=3.0, n_grid=500)
    assert np.abs(pair.states - y).max() <= 1e-9
    assert np.abs(pair.controls).max() <= 1e-9


def test_feedback_steer_six_state_terminal_error():
    from ctrlflow.systems import six_state_matrices, six_state_output

    A, B = six_state_matrices()
    K = place_poles(A, B, [-2.0, -2.0, -2.0, -2.4, -2.4, -2.4], seed=0)
    rng = np.random.default_rng(24)
    x0 = rng.standard_normal(6)
    y = np.zeros(6)
    y[0], y[2] = 1.5, -0.5
    pair = feedback_steer_pair(A, B, K, y, x0, T=6.0, n_grid=1200)
    out_err = np.linalg.norm(six_state_output(pair.states[-1]) - six_state_output(y))
    assert out_err <= 1e-3


def test_feedback_steer_exponential_envelope():
    # horizons long enough that the slowest closed-loop mode dominates
    K = place_poles(A_DI, B_DI, [-1.0, -2.0])
    lam = np.linalg.eigvals(A_DI + B_DI @ K).real.max()
    x0 = np.array([3.0, 0.0])
    y = np.zeros(2)
    e1 = np.linalg.norm(
        feedback_steer_pair(A_DI, B_DI, K, y, x0, T=6.0, n_grid=1200).states[-1] - y
    )
    e2 = np.linalg.norm(
        feedback_steer_pair(A_DI, B_DI, K, y, x0, T=9.0, n_grid=1800).states[-1] - y
    )
    assert e2 / e1 <= np.exp(lam * 3.0) * 1.01


def test_feedback_steer_rejects_unstable_gain():
    with pytest.raises(UnstableGainError):
        feedback_steer_pair(
            A_DI, B_DI, np.array([[1.0, 1.0]]), np.zeros(2), np.ones(2), 1.0, 100
        )


def test_feedback_steer_rejects_non_equilibrium():
    with pytest.raises(InfeasibleTargetError):
        feedback_steer_pair(
            A_DI,
            B_DI,
            place_poles(A_DI, B_DI, [-1.0, -2.0]),
            np.array([0.0, 1.0]),  # nonzero velocity cannot be held
            np.zeros(2),
            1.0,
            100,
        )


def test_equilibrium_control_residual():
    from ctrlflow.systems import six_state_matrices

    A, B = six_state_matrices()
    y = np.zeros(6)
    y[0] = 2.0
    alpha = equilibrium_control(A, B, y)
    assert np.linalg.norm(A @ y + B @ alpha) <= 1e-10


# ---------------------------------------------------------------------------
# Brockett steering


def test_brockett_vertical_case():
    pair = brockett_steer_pair(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    # phase 1 controls vanish; phase 2 constant c = 1/pi
    K = len(pair.t_grid) // 2
    assert np.abs(pair.controls[: K // 2]).max() <= 1e-12
    assert abs(pair.meta["loop_amplitude"] - 1.0 / np.pi) <= 1e-12
    assert np.linalg.norm(pair.states[-1] - [0.0, 0.0, 1.0]) <= 1e-8


def test_brockett_diagonal_case():
    pair = brockett_steer_pair(np.zeros(3), np.array([1.0, 1.0, 0.0]))
    assert abs(pair.meta["loop_amplitude"] + 1.0 / (2.0 * np.pi)) <= 1e-12
    assert np.linalg.norm(pair.states[-1] - [1.0, 1.0, 0.0]) <= 1e-8


def test_brockett_fixed_point_roundtrip():
    pair = brockett_steer_pair(np.zeros(3), np.zeros(3))
    assert abs(pair.meta["loop_amplitude"]) <= 1e-12
    assert np.linalg.norm(pair.states[-1]) <= 1e-8


def test_brockett_random_pairs_terminal():
    rng = np.random.default_rng(25)
    xs = rng.uniform(-1.0, 1.0, size=(100, 3))
    ys = rng.uniform(-1.0, 1.0, size=(100, 3))
    pairs = brockett_steer_pair_batch(xs, ys, n_grid=4000)
    errs = [np.linalg.norm(p.states[-1] - y) for p, y in zip(pairs, ys)]
    assert max(errs) <= 1e-6


def test_brockett_horizon_is_4pi():
    pair = brockett_steer_pair(np.zeros(3), np.ones(3), n_grid=100)
    assert abs(pair.horizon - 4.0 * np.pi) <= 1e-12


def test_brockett_pair_is_dynamically_consistent():
    # the stored node samples under-resolve the sinusoid, so re-integration
    # under the piecewise-linear convention carries an O(h^2) mismatch; the
    # measured residual at this grid sits near 3e-4
    sys = builtin_system("brockett")
    pair = brockett_steer_pair(np.zeros(3), np.array([0.5, -0.3, 0.8]), n_grid=4000)
    assert pair.residual_error(sys) <= 1e-3
