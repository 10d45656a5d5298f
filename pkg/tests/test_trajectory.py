"""Trajectory container invariants and CSV persistence round trips."""

import json

import numpy as np
import pytest

from ctrlflow.errors import ConfigurationError
from ctrlflow.systems import builtin_system
from ctrlflow.trajectory import (
    TrajectoryControlPair,
    load_pair_csv,
    save_pair_bundle,
    save_pair_csv,
)


def _simple_pair(n=11):
    t = np.linspace(0.0, 1.0, n)
    states = np.stack([t, t**2], axis=1)
    controls = (2.0 * t)[:, None]
    return TrajectoryControlPair(t, states, controls)


def test_lengths_must_agree():
    t = np.linspace(0.0, 1.0, 5)
    with pytest.raises(ConfigurationError):
        TrajectoryControlPair(t, np.zeros((4, 2)), np.zeros((5, 1)))
    with pytest.raises(ConfigurationError):
        TrajectoryControlPair(t, np.zeros((5, 2)), np.zeros((4, 1)))


def test_time_grid_must_increase():
    t = np.array([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ConfigurationError):
        TrajectoryControlPair(t, np.zeros((4, 1)), np.zeros((4, 1)))


def test_horizon_and_endpoints():
    pair = _simple_pair()
    assert pair.horizon == 1.0
    assert (pair.d, pair.m) == (2, 1)
    assert np.allclose(pair.states[0], [0.0, 0.0])
    assert np.allclose(pair.states[-1], [1.0, 1.0])


def test_control_energy_simpson_exact():
    # u(t) = 2t so the energy integral is 4/3, exact under Simpson
    pair = _simple_pair(21)
    assert abs(pair.control_energy() - 4.0 / 3.0) < 1e-12


def test_state_at_interpolates_linearly():
    pair = _simple_pair(3)  # nodes at t = 0, 0.5, 1
    mid = pair.state_at(0.25)
    expected = 0.5 * (pair.states[0] + pair.states[1])
    assert np.allclose(mid, expected)
    assert np.allclose(pair.state_at(0.0), pair.states[0])
    assert np.allclose(pair.state_at(1.0), pair.states[-1])


def test_residual_error_accepts_consistent_pair():
    # min-energy style oracle: integrate a known control, check residual
    from ctrlflow.interpolants import min_energy_pair

    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    sys = builtin_system("linear", A=A, B=B)
    pair = min_energy_pair(A, B, np.zeros(2), np.array([1.0, 0.0]), 1.0, 400)
    assert pair.residual_error(sys) <= 1e-6


def test_residual_error_flags_wrong_controls():
    from ctrlflow.interpolants import min_energy_pair

    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    sys = builtin_system("linear", A=A, B=B)
    pair = min_energy_pair(A, B, np.zeros(2), np.array([1.0, 0.0]), 1.0, 400)
    corrupted = TrajectoryControlPair(pair.t_grid, pair.states, pair.controls + 1.0)
    assert corrupted.residual_error(sys) > 1e-2


def test_csv_round_trip(tmp_path):
    pair = _simple_pair()
    path = tmp_path / "pair.csv"
    save_pair_csv(pair, path)
    back = load_pair_csv(path)
    assert np.allclose(back.t_grid, pair.t_grid, atol=1e-15)
    assert np.allclose(back.states, pair.states, atol=1e-15)
    assert np.allclose(back.controls, pair.controls, atol=1e-15)


def test_csv_header_names_dimensions(tmp_path):
    pair = _simple_pair()
    path = tmp_path / "pair.csv"
    save_pair_csv(pair, path)
    header = path.read_text().splitlines()[0]
    assert header.split(",") == ["t", "x_1", "x_2", "u_1"]


def test_bundle_writes_index_and_files(tmp_path):
    pairs = [_simple_pair(7), _simple_pair(9)]
    pairs[0].meta["endpoint_error"] = 1.5e-7
    names = save_pair_bundle(pairs, tmp_path, prefix="train", index_extra={"seed": 3})
    assert len(names) == 3  # two CSVs plus the index
    index = json.loads((tmp_path / "train_index.json").read_text())
    assert index["count"] == 2
    assert index["seed"] == 3
    assert index["pairs"][0]["endpoint_error"] == 1.5e-7
    for name in names:
        assert (tmp_path / name).exists()
