"""Fixed-step RK4 integrators, batched over trajectories.

All integrators advance a whole batch of trajectories at once (states are
(n, d) arrays), which keeps per-sample arithmetic identical to the
single-trajectory path while avoiding Python-level loops over samples.
Trajectories that leave the finite regime are frozen at their last good
state and flagged, so one bad sample cannot poison a batch.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import BlowUpError, ConfigurationError

DEFAULT_BLOWUP = 1.0e6


def uniform_grid(T: float, n_steps: int) -> np.ndarray:
    """Time grid with ``n_steps`` RK4 steps on [0, T] (n_steps + 1 nodes)."""
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if not np.isfinite(T) or T <= 0:
        raise ConfigurationError(f"horizon must be positive and finite, got {T}")
    return np.linspace(0.0, float(T), int(n_steps) + 1)


def stage_times(t_grid: np.ndarray) -> np.ndarray:
    """Interleaved node and midpoint times, shape (2K + 1,) for K steps."""
    t_grid = np.asarray(t_grid, dtype=float)
    mids = 0.5 * (t_grid[:-1] + t_grid[1:])
    out = np.empty(2 * len(t_grid) - 1)
    out[0::2] = t_grid
    out[1::2] = mids
    return out


def pl_stage_values(samples: np.ndarray) -> np.ndarray:
    """Node samples (..., K+1, m) -> stage values (..., 2K+1, m).

    Midpoints are the piecewise-linear interpolants, i.e. neighbour averages.
    """
    samples = np.asarray(samples, dtype=float)
    K = samples.shape[-2] - 1
    out = np.empty(samples.shape[:-2] + (2 * K + 1, samples.shape[-1]))
    out[..., 0::2, :] = samples
    out[..., 1::2, :] = 0.5 * (samples[..., :-1, :] + samples[..., 1:, :])
    return out


def _check_blowup(x: np.ndarray, threshold: float) -> np.ndarray:
    """Rows of (n, d) that are non-finite or larger than the threshold."""
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(x).all(axis=-1)
        bad |= np.abs(x).max(axis=-1) > threshold
    return bad


def rk4_field(
    field: Callable[[float, np.ndarray], np.ndarray],
    x0: np.ndarray,
    t_grid: np.ndarray,
    blowup: float | None = DEFAULT_BLOWUP,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``x' = field(t, x)`` for a batch of initial states.

    Parameters
    ----------
    field : callable mapping (t, states (n, d)) to derivatives (n, d).
    x0 : (n, d) initial states.
    t_grid : (K + 1,) strictly increasing times.
    blowup : freeze trajectories whose sup-norm exceeds this (None disables).

    Returns
    -------
    states : (n, K + 1, d) array; frozen rows repeat their last good state.
    bad_time : (n,) array, NaN for clean rows, else the first bad node time.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    n, d = x0.shape
    K = len(t_grid) - 1
    states = np.empty((n, K + 1, d))
    states[:, 0] = x0
    bad_time = np.full(n, np.nan)
    active = ~_check_blowup(x0, blowup if blowup is not None else np.inf)
    bad_time[~active] = t_grid[0]
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            t, t1 = t_grid[k], t_grid[k + 1]
            h = t1 - t
            k1 = field(t, x)
            k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = field(t1, x + h * k3)
            x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if blowup is not None:
                newly_bad = active & _check_blowup(x_new, blowup)
                bad_time[newly_bad] = t1
                active &= ~newly_bad
            x = np.where(active[:, None], x_new, x)
            states[:, k + 1] = x
    return states, bad_time


def rk4_stage_controls(
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    t_grid: np.ndarray,
    u_stages: np.ndarray,
    blowup: float | None = DEFAULT_BLOWUP,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``x' = rhs(x, u(t))`` with control values given per RK4 stage.

    ``u_stages`` has shape (n, 2K + 1, m): even indices are the node values,
    odd indices the midpoint values (see :func:`stage_times`).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    u_stages = np.asarray(u_stages, dtype=float)
    if u_stages.ndim == 2:
        u_stages = np.broadcast_to(u_stages, (x0.shape[0],) + u_stages.shape)
    t_grid = np.asarray(t_grid, dtype=float)
    n, d = x0.shape
    K = len(t_grid) - 1
    if u_stages.shape[1] != 2 * K + 1:
        raise ConfigurationError(
            f"u_stages has {u_stages.shape[1]} stages, expected {2 * K + 1}"
        )
    states = np.empty((n, K + 1, d))
    states[:, 0] = x0
    bad_time = np.full(n, np.nan)
    active = ~_check_blowup(x0, blowup if blowup is not None else np.inf)
    bad_time[~active] = t_grid[0]
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            h = t_grid[k + 1] - t_grid[k]
            u0 = u_stages[:, 2 * k]
            um = u_stages[:, 2 * k + 1]
            u1 = u_stages[:, 2 * k + 2]
            k1 = rhs(x, u0)
            k2 = rhs(x + 0.5 * h * k1, um)
            k3 = rhs(x + 0.5 * h * k2, um)
            k4 = rhs(x + h * k3, u1)
            x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if blowup is not None:
                newly_bad = active & _check_blowup(x_new, blowup)
                bad_time[newly_bad] = t_grid[k + 1]
                active &= ~newly_bad
            x = np.where(active[:, None], x_new, x)
            states[:, k + 1] = x
    return states, bad_time


def raise_on_blowup(bad_time: np.ndarray) -> None:
    """Raise :class:`BlowUpError` for the first flagged trajectory, if any."""
    bad = np.where(np.isfinite(bad_time))[0]
    if len(bad):
        raise BlowUpError(float(bad_time[bad[0]]))


def integrate_samples(y: np.ndarray, t_grid: np.ndarray) -> np.ndarray:
    """Integral of sampled values over the grid, composite Simpson rule.

    ``y`` has shape (..., K + 1); an odd number of steps falls back to
    trapezoid on the final interval. The grid must be uniform.
    """
    y = np.asarray(y, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    K = len(t_grid) - 1
    h = (t_grid[-1] - t_grid[0]) / K
    n_simpson = K if K % 2 == 0 else K - 1
    total = np.zeros(y.shape[:-1])
    if n_simpson >= 2:
        w = np.ones(n_simpson + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        total = total + (h / 3.0) * np.tensordot(y[..., : n_simpson + 1], w, axes=([-1], [0]))
    if n_simpson != K:
        total = total + 0.5 * h * (y[..., -2] + y[..., -1])
    return total
