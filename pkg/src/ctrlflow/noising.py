"""Noising dynamics: extremal flows and randomized controls, run backward.

To stabilize onto a target set, trajectories are generated FROM the target
by integrating the time-reversed dynamics omega' = -f(omega, u) driven
either by extremal controls of the reversed optimal control problem (kind
``pmp``) or by Brownian control paths (kind ``randomized``).  The resulting
(t, X_t, U_t) triples are the supervision for the feedback regression; the
closed-loop reversal of the learned law then carries mass back onto the
target set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .ode import pl_stage_values, raise_on_blowup, rk4_field, rk4_stage_controls, uniform_grid
from .seeding import generator_from_seed, stream_key, substream
from .systems import ControlAffineSystem
from .trajectory import TrajectoryControlPair


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost L(x, u) = theta * |u|^2."""

    theta: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta <= 0.0:
            raise ConfigurationError(f"theta must be positive, got {self.theta}")

    def value(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.theta * np.sum(u**2, axis=-1)

    def grad_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        # the cost does not depend on the state
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class PmpState:
    """State/costate bundle (omega, p) of the extremal system."""

    omega: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if omega.shape != p.shape:
            raise ConfigurationError(
                f"state and costate shapes differ: {omega.shape} vs {p.shape}"
            )
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(p))):
            raise ConfigurationError("state and costate must be finite")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class BrownianControlPath:
    """Sampled Brownian control path starting at zero."""

    t_grid: np.ndarray
    values: np.ndarray
    sigma: float
    seed: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != len(t):
            raise ConfigurationError("values must have one row per grid node")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "values", v)


def pmp_optimal_control(
    sys: ControlAffineSystem, cost: QuadraticCost, x: np.ndarray, p: np.ndarray
) -> np.ndarray:
    """Minimizing control alpha_i = <p, f_i(x)> / (2 theta).

    This is the argmin over u of -<p, f(x, u)> + L(x, u) for the quadratic
    cost; batched over (n, d) states/costates.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    pb = p[None, :] if single else p
    G = sys.control_matrix(xb)
    alpha = np.einsum("ndm,nd->nm", G, pb) / (2.0 * cost.theta)
    return alpha[0] if single else alpha


def hamiltonian(
    sys: ControlAffineSystem, cost: QuadraticCost, omega: np.ndarray, p: np.ndarray
) -> np.ndarray:
    """H(omega, p) = -<p, f(omega, alpha)> + L(alpha) at the minimizing alpha."""
    omega = np.asarray(omega, dtype=float)
    p = np.asarray(p, dtype=float)
    single = omega.ndim == 1
    wb = omega[None, :] if single else omega
    pb = p[None, :] if single else p
    alpha = pmp_optimal_control(sys, cost, wb, pb)
    f = sys.rhs(wb, alpha)
    H = -np.einsum("nd,nd->n", pb, f) + cost.value(alpha)
    return float(H[0]) if single else H


def _pmp_field(sys, cost, adjoint_sign: str):
    d = sys.d
    sign = -1.0 if adjoint_sign == "canonical" else 1.0

    def fld(t, Y):
        w = Y[:, :d]
        p = Y[:, d:]
        G = sys.control_matrix(w)
        alpha = np.einsum("ndm,nd->nm", G, p) / (2.0 * cost.theta)
        f = sys.f0(w) + np.einsum("ndm,nm->nd", G, alpha)
        Jf = sys.rhs_jac_x(w, alpha)
        pdot = np.einsum("nij,ni->nj", Jf, p) + sign * cost.grad_x(w, alpha)
        return np.hstack([-f, pdot])

    return fld


def pmp_extremal_batch(
    sys: ControlAffineSystem,
    cost: QuadraticCost,
    x0s: np.ndarray,
    p0s: np.ndarray,
    T: float,
    n_grid: int,
    adjoint_sign: str = "canonical",
    blowup: float | None = 1.0e6,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched extremal flow of the time-reversed system.

    Integrates omega' = -f(omega, alpha), p' = (D_x f)' p -+ grad_x L with
    alpha the minimizing control.  Returns (t_grid, states, costates,
    controls, bad_time) with states (n, K+1, d).
    """
    if adjoint_sign not in ("canonical", "paper"):
        raise ConfigurationError(f"unknown adjoint_sign '{adjoint_sign}'")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    p0s = np.atleast_2d(np.asarray(p0s, dtype=float))
    if x0s.shape != p0s.shape or x0s.shape[1] != sys.d:
        raise ConfigurationError(
            f"x0s and p0s must both be (n, {sys.d}), got {x0s.shape} and {p0s.shape}"
        )
    t_grid = uniform_grid(T, n_grid)
    Y0 = np.hstack([x0s, p0s])
    traj, bad_time = rk4_field(_pmp_field(sys, cost, adjoint_sign), Y0, t_grid, blowup)
    states = traj[:, :, : sys.d]
    costates = traj[:, :, sys.d :]
    n, Kp1, d = states.shape
    flat_w = states.reshape(-1, d)
    flat_p = costates.reshape(-1, d)
    controls = pmp_optimal_control(sys, cost, flat_w, flat_p).reshape(n, Kp1, sys.m)
    return t_grid, states, costates, controls, bad_time


def pmp_extremal(
    sys: ControlAffineSystem,
    cost: QuadraticCost,
    x0: np.ndarray,
    p0: np.ndarray,
    T: float,
    n_grid: int,
    adjoint_sign: str = "canonical",
) -> tuple[TrajectoryControlPair, np.ndarray]:
    """Single extremal; returns the trajectory pair and the costate path."""
    init = PmpState(np.asarray(x0, dtype=float), np.asarray(p0, dtype=float))
    t_grid, states, costates, controls, bad = pmp_extremal_batch(
        sys, cost, init.omega[None, :], init.p[None, :], T, n_grid, adjoint_sign
    )
    raise_on_blowup(bad)
    H0 = hamiltonian(sys, cost, states[0, 0], costates[0, 0])
    pair = TrajectoryControlPair(
        t_grid, states[0], controls[0], meta={"hamiltonian_0": H0}
    )
    return pair, costates[0]


def hamiltonian_drift(
    sys: ControlAffineSystem,
    cost: QuadraticCost,
    states: np.ndarray,
    costates: np.ndarray,
) -> float:
    """max_t |H(t) - H(0)| / (1 + |H(0)|) along one extremal."""
    H = hamiltonian(sys, cost, states, costates)
    return float(np.abs(H - H[0]).max() / (1.0 + abs(H[0])))


def exp_map(
    sys: ControlAffineSystem,
    cost: QuadraticCost,
    x: np.ndarray,
    t: float,
    p0: np.ndarray,
    n_grid: int = 1000,
    adjoint_sign: str = "canonical",
) -> np.ndarray:
    """Endpoint omega(t) of the extremal from (x, p0)."""
    pair, _ = pmp_extremal(sys, cost, x, p0, t, n_grid, adjoint_sign)
    return pair.states[-1]


def exp_map_batch(
    sys: ControlAffineSystem,
    cost: QuadraticCost,
    x: np.ndarray,
    t: float,
    p0s: np.ndarray,
    n_grid: int = 1000,
    adjoint_sign: str = "canonical",
) -> np.ndarray:
    """Endpoints of extremals from a common x over a batch of costates."""
    p0s = np.atleast_2d(np.asarray(p0s, dtype=float))
    x0s = np.broadcast_to(np.asarray(x, dtype=float), p0s.shape)
    _, states, _, _, bad = pmp_extremal_batch(
        sys, cost, x0s, p0s, t, n_grid, adjoint_sign
    )
    raise_on_blowup(bad)
    return states[:, -1]


def endpoint_map_batch(
    sys: ControlAffineSystem,
    x0s: np.ndarray,
    t_grid: np.ndarray,
    u_samples: np.ndarray,
    direction: str = "reversed",
    blowup: float | None = 1.0e6,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate +-f(omega, u(t)) for a batch of control sample paths.

    ``u_samples`` is (n, K+1, m), interpreted piecewise-linearly; direction
    ``forward`` uses +f, ``reversed`` uses -f.  Returns (states, bad_time).
    """
    if direction not in ("forward", "reversed"):
        raise ConfigurationError(f"unknown direction '{direction}'")
    sgn = 1.0 if direction == "forward" else -1.0
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    u_samples = np.asarray(u_samples, dtype=float)
    if u_samples.ndim == 2:
        u_samples = u_samples[None, :, :]
    if u_samples.shape[0] == 1 and x0s.shape[0] > 1:
        u_samples = np.broadcast_to(
            u_samples, (x0s.shape[0],) + u_samples.shape[1:]
        )
    u_stages = pl_stage_values(u_samples)

    def rhs(x, u):
        return sgn * sys.rhs(x, u)

    return rk4_stage_controls(rhs, x0s, t_grid, u_stages, blowup)


def endpoint_map(
    sys: ControlAffineSystem,
    x0: np.ndarray,
    control: BrownianControlPath | TrajectoryControlPair,
    direction: str = "reversed",
) -> TrajectoryControlPair:
    """Trajectory of +-f driven by a stored control path from x0."""
    if isinstance(control, TrajectoryControlPair):
        t_grid, values = control.t_grid, control.controls
    else:
        t_grid, values = control.t_grid, control.values
    states, bad = endpoint_map_batch(
        sys, np.asarray(x0, dtype=float)[None, :], t_grid, values[None, :, :], direction
    )
    raise_on_blowup(bad)
    return TrajectoryControlPair(t_grid, states[0], values, meta={"direction": direction})


def sample_brownian_control(
    m: int, T: float, n_grid: int, sigma: float, seed: int
) -> BrownianControlPath:
    """Brownian path B with B(0) = 0 and increments N(0, sigma^2 dt).

    The generator is counter-based and keyed by the seed, so equal seeds
    give bit-identical paths and distinct seeds give independent paths.
    """
    if sigma < 0.0:
        raise ConfigurationError(f"sigma must be nonnegative, got {sigma}")
    t_grid = uniform_grid(T, n_grid)
    values = np.zeros((n_grid + 1, m))
    if sigma > 0.0:
        rng = generator_from_seed(seed)
        dt = np.diff(t_grid)
        incs = rng.standard_normal((n_grid, m)) * (sigma * np.sqrt(dt))[:, None]
        values[1:] = np.cumsum(incs, axis=0)
    return BrownianControlPath(t_grid=t_grid, values=values, sigma=float(sigma), seed=seed)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class NoisingConfig:
    """Parameters of a noising run; see :func:`generate_noising_dataset`."""

    kind: str  # "pmp" | "randomized"
    T: float
    n_grid: int
    n_samples: int
    n_time_samples: int = 25
    theta: float = 1.0
    sigma: float = 1.0
    p_scale: float = 1.0
    adjoint_sign: str = "canonical"
    blowup: float = 1.0e6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pmp", "randomized"):
            raise ConfigurationError(f"unknown noising kind '{self.kind}'")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")
        if not 2 <= self.n_time_samples:
            raise ConfigurationError("n_time_samples must be >= 2")


@dataclass
class NoisingReport:
    """Bookkeeping from a noising run."""

    n_requested: int
    n_kept: int
    excluded: list = field(default_factory=list)  # (sample index, first bad time)
    warnings: list = field(default_factory=list)
    hamiltonian_drift_max: Optional[float] = None
    endpoints: Optional[np.ndarray] = None

    @property
    def excluded_count(self) -> int:
        return len(self.excluded)


def generate_noising_dataset(
    sys: ControlAffineSystem,
    config: NoisingConfig,
    mu0_sampler: Callable[[int, int], np.ndarray],
    p_sampler: Callable[[int, int], np.ndarray] | None = None,
):
    """Noising trajectories from the target measure, flattened for regression.

    ``mu0_sampler(n, seed)`` draws starting states on the target set.  For
    kind ``pmp``, initial costates come from ``p_sampler`` (default
    N(0, p_scale^2 I)); for kind ``randomized``, each sample gets an
    independent Brownian control path with the configured sigma.  Blown-up
    trajectories are dropped and reported with a warning entry.

    Returns ``(dataset, report)`` where dataset is a
    :class:`ctrlflow.regression.RegressionDataset` of (t, X_t, U_t) triples
    tagged by trajectory id.
    """
    from .regression import RegressionDataset

    n = config.n_samples
    x0s = np.asarray(mu0_sampler(n, stream_key(config.seed, "noising", "x0") % 2**63))
    x0s = np.atleast_2d(x0s.astype(float))
    if x0s.shape != (n, sys.d):
        raise ConfigurationError(
            f"mu0_sampler returned shape {x0s.shape}, expected ({n}, {sys.d})"
        )

    if config.kind == "pmp":
        if p_sampler is None:
            rng = substream(config.seed, "noising", "p0")
            p0s = config.p_scale * rng.standard_normal((n, sys.d))
        else:
            p0s = np.atleast_2d(
                np.asarray(
                    p_sampler(n, stream_key(config.seed, "noising", "p0") % 2**63),
                    dtype=float,
                )
            )
        cost = QuadraticCost(theta=config.theta)
        t_grid, states, costates, controls, bad = pmp_extremal_batch(
            sys, cost, x0s, p0s, config.T, config.n_grid,
            config.adjoint_sign, config.blowup,
        )
        keep = ~np.isfinite(bad)
        drift = None
        if keep.any():
            H = hamiltonian(
                sys,
                cost,
                states[keep].reshape(-1, sys.d),
                costates[keep].reshape(-1, sys.d),
            ).reshape(keep.sum(), -1)
            drift = float(
                (np.abs(H - H[:, :1]).max(axis=1) / (1.0 + np.abs(H[:, 0]))).max()
            )
    else:
        # independent Brownian path per sample, stream keyed by sample index
        t_grid = uniform_grid(config.T, config.n_grid)
        u_all = np.zeros((n, config.n_grid + 1, sys.m))
        for i in range(n):
            path = sample_brownian_control(
                sys.m, config.T, config.n_grid, config.sigma,
                stream_key(config.seed, "noising", "brownian", i) % 2**63,
            )
            u_all[i] = path.values
        states, bad = endpoint_map_batch(
            sys, x0s, t_grid, u_all, direction="reversed", blowup=config.blowup
        )
        controls = u_all
        keep = ~np.isfinite(bad)
        drift = None

    report = NoisingReport(n_requested=n, n_kept=int(keep.sum()))
    for i in np.where(~keep)[0]:
        report.excluded.append((int(i), float(bad[i])))
    if report.excluded:
        report.warnings.append(
            f"excluded {report.excluded_count} blown-up trajectories "
            f"out of {n}"
        )
    report.hamiltonian_drift_max = drift
    if report.n_kept == 0:
        raise ConfigurationError("all noising trajectories blew up; nothing to fit")
    report.endpoints = states[keep][:, -1].copy()

    idx = np.unique(np.round(np.linspace(0, config.n_grid, config.n_time_samples)).astype(int))
    kept_states = states[keep][:, idx]
    kept_controls = controls[keep][:, idx]
    n_kept = report.n_kept
    n_idx = len(idx)
    t_col = np.tile(t_grid[idx], n_kept)
    x_rows = kept_states.reshape(n_kept * n_idx, sys.d)
    u_rows = kept_controls.reshape(n_kept * n_idx, sys.m)
    traj_ids = np.repeat(np.where(keep)[0], n_idx)
    dataset = RegressionDataset(t=t_col, x=x_rows, u=u_rows, traj_id=traj_ids)
    return dataset, report
