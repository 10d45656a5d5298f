"""Point-to-point steering constructions for trajectory/control pairs.

Each constructor returns a :class:`TrajectoryControlPair` whose controls
drive the stated system from x0 to the target within a stated tolerance:

``min_energy_pair``
    minimum-energy steering of a controllable LTI pair through the
    controllability Gramian,
``feedback_steer_pair``
    stabilizing-gain steering of an LTI system to an equilibrium point,
``brockett_steer_pair``
    two-phase sinusoidal steering of the Brockett system between arbitrary
    points on [0, 4*pi].

Batch variants (suffix ``_batch``) vectorize over many (x0, target) pairs
and are what the experiment pipelines call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    InfeasibleTargetError,
    UncontrollablePairError,
    UnstableGainError,
)
from .linalg import controllability_matrix, expm, kalman_rank
from .ode import rk4_field, rk4_stage_controls, stage_times, uniform_grid
from .seeding import substream
from .systems import ControlAffineSystem, builtin_system
from .trajectory import TrajectoryControlPair

GRAMIAN_EIG_RATIO = 1.0e-10


@dataclass(frozen=True)
class Gramian:
    """Finite-horizon controllability Gramian with its quadrature metadata."""

    W: np.ndarray
    T: float
    n_quad: int

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.W)[0])


def _check_ab(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigurationError(f"A must be square, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ConfigurationError(f"B has {B.shape[0]} rows, expected {A.shape[0]}")
    return A, B


def gramian(A: np.ndarray, B: np.ndarray, T: float, n_quad: int = 256) -> Gramian:
    """W = integral of exp(At) B B' exp(A't) over [0, T], composite Simpson.

    ``n_quad`` counts quadrature intervals (made even, at least 16).  The
    result is symmetrized so eigenvalue checks see an exactly symmetric
    matrix.
    """
    A, B = _check_ab(A, B)
    if not np.isfinite(T) or T <= 0:
        raise ConfigurationError(f"horizon must be positive, got {T}")
    n_quad = max(16, int(n_quad))
    if n_quad % 2:
        n_quad += 1
    h = T / n_quad
    Eh = expm(A * h)
    BBt = B @ B.T
    E = np.eye(A.shape[0])
    W = np.zeros_like(A)
    for k in range(n_quad + 1):
        w = 1.0 if k in (0, n_quad) else (4.0 if k % 2 else 2.0)
        W = W + w * (E @ BBt @ E.T)
        if k < n_quad:
            E = E @ Eh
    W = W * (h / 3.0)
    W = 0.5 * (W + W.T)
    return Gramian(W=W, T=float(T), n_quad=n_quad)


def _gramian_solve(G: Gramian, rhs: np.ndarray) -> np.ndarray:
    eigs = np.linalg.eigvalsh(G.W)
    if eigs[0] < GRAMIAN_EIG_RATIO * max(eigs[-1], 1.0e-300):
        raise UncontrollablePairError(
            f"Gramian is numerically singular (min eig {eigs[0]:.3g}, "
            f"max eig {eigs[-1]:.3g}); the pair (A, B) is not controllable "
            "on this horizon"
        )
    return np.linalg.solve(G.W, rhs)


def min_energy_pair(
    A: np.ndarray,
    B: np.ndarray,
    x0: np.ndarray,
    xT: np.ndarray,
    T: float,
    n_grid: int = 2000,
    n_quad: int = 256,
    tol_end: float | None = None,
) -> TrajectoryControlPair:
    """Minimum-energy steering of x' = Ax + Bu from x0 to xT in time T.

    The control is u(t) = B' exp(A'(T-t)) W^-1 (xT - exp(AT) x0); states are
    produced by RK4 with ``n_grid`` steps using the analytic control at the
    stage times.  The terminal state must land within ``tol_end`` (default
    1e-6 * (1 + |xT|)) of the target.
    """
    pairs = min_energy_pair_batch(
        A, B, np.asarray(x0)[None, :], np.asarray(xT)[None, :], T, n_grid, n_quad, tol_end
    )
    return pairs[0]


def min_energy_pair_batch(
    A: np.ndarray,
    B: np.ndarray,
    x0s: np.ndarray,
    xTs: np.ndarray,
    T: float,
    n_grid: int = 2000,
    n_quad: int = 256,
    tol_end: float | None = None,
) -> list[TrajectoryControlPair]:
    """Vectorized :func:`min_energy_pair` over rows of x0s/xTs."""
    A, B = _check_ab(A, B)
    d = A.shape[0]
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    xTs = np.atleast_2d(np.asarray(xTs, dtype=float))
    if x0s.shape[1] != d or xTs.shape[1] != d or x0s.shape[0] != xTs.shape[0]:
        raise ConfigurationError(
            f"endpoint batches must be (n, {d}), got {x0s.shape} and {xTs.shape}"
        )
    G = gramian(A, B, T, n_quad)
    eAT = expm(A * T)
    c = _gramian_solve(G, (xTs - x0s @ eAT.T).T).T  # (n, d)

    t_grid = uniform_grid(T, n_grid)
    stages = stage_times(t_grid)
    # Bt_e[j] = B' exp(A'(T - stages[j])), built by marching with a half step
    half = expm(-A.T * (stages[1] - stages[0]))
    Et = expm(A.T * T)
    Bt_e = np.empty((len(stages), B.shape[1], d))
    for j in range(len(stages)):
        Bt_e[j] = B.T @ Et
        Et = Et @ half
    u_stages = np.einsum("jmd,nd->njm", Bt_e, c)

    def rhs(x, u):
        return x @ A.T + u @ B.T

    states, bad = rk4_stage_controls(rhs, x0s, t_grid, u_stages, blowup=None)
    pairs = []
    for i in range(x0s.shape[0]):
        tol = tol_end if tol_end is not None else 1.0e-6 * (1.0 + np.linalg.norm(xTs[i]))
        err = float(np.linalg.norm(states[i, -1] - xTs[i]))
        if err > tol:
            raise ConfigurationError(
                f"terminal error {err:.3g} exceeds tol {tol:.3g}; increase n_grid"
            )
        pairs.append(
            TrajectoryControlPair(
                t_grid, states[i], u_stages[i, 0::2], meta={"endpoint_error": err}
            )
        )
    return pairs


def place_poles(A: np.ndarray, B: np.ndarray, poles, seed: int = 0) -> np.ndarray:
    """Gain K such that eig(A + BK) equals the desired pole list.

    Single-input pairs use Ackermann's formula; multi-input pairs assign a
    real block-diagonal eigenstructure by solving a Sylvester equation with
    random right-hand vectors, retrying on poor conditioning.  The pole list
    must be closed under conjugation and no pole may repeat more often than
    the number of inputs (the assignment stays diagonalizable).
    """
    A, B = _check_ab(A, B)
    d, m = A.shape[0], B.shape[1]
    poles = np.asarray(poles, dtype=complex)
    if poles.shape != (d,):
        raise ConfigurationError(f"need exactly {d} poles, got shape {poles.shape}")
    if kalman_rank(A, B) < d:
        raise UncontrollablePairError("(A, B) is not controllable; cannot place poles")
    if not np.allclose(np.sort_complex(poles), np.sort_complex(np.conj(poles))):
        raise ConfigurationError("pole list must be closed under conjugation")

    if m == 1:
        phi = np.real_if_close(np.poly(poles))
        if np.iscomplexobj(phi):
            raise ConfigurationError("pole list must define a real polynomial")
        phiA = np.zeros_like(A)
        for coef in phi:
            phiA = phiA @ A + coef * np.eye(d)
        C = controllability_matrix(A, B)
        last_row = np.zeros(d)
        last_row[-1] = 1.0
        K = -(np.linalg.solve(C.T, last_row) @ phiA)[None, :]
        _verify_poles(A, B, K, poles)
        return K

    # multi-input: real block form of the poles
    _, counts = np.unique(np.round(poles, 9), return_counts=True)
    if counts.max() > m:
        raise ConfigurationError(
            f"pole multiplicity {counts.max()} exceeds input count {m}; "
            "the diagonalizable assignment cannot realize it"
        )
    Lam = _real_block_form(poles)
    rng = substream(seed, "place_poles")
    Id = np.eye(d)
    M = np.kron(Id, A) - np.kron(Lam.T, Id)
    for _ in range(64):
        Gmat = rng.standard_normal((m, d))
        try:
            X = np.linalg.solve(M, (-B @ Gmat).flatten(order="F")).reshape((d, d), order="F")
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(X)):
            continue
        if np.linalg.cond(X) > 1.0e8:
            continue
        K = np.linalg.solve(X.T, Gmat.T).T
        try:
            _verify_poles(A, B, K, poles)
        except ConfigurationError:
            continue
        return K
    raise ConfigurationError("pole placement failed to find a well-conditioned assignment")


def _real_block_form(poles: np.ndarray) -> np.ndarray:
    """Block-diagonal real matrix with the given conjugate-closed spectrum."""
    remaining = list(poles)
    blocks = []
    while remaining:
        lam = remaining.pop(0)
        if abs(lam.imag) < 1.0e-12:
            blocks.append(np.array([[lam.real]]))
        else:
            conj = np.conj(lam)
            hit = next(
                (i for i, z in enumerate(remaining) if abs(z - conj) < 1.0e-9), None
            )
            if hit is None:
                raise ConfigurationError("pole list must be closed under conjugation")
            remaining.pop(hit)
            a, b = lam.real, abs(lam.imag)
            blocks.append(np.array([[a, b], [-b, a]]))
    d = sum(b.shape[0] for b in blocks)
    Lam = np.zeros((d, d))
    at = 0
    for b in blocks:
        k = b.shape[0]
        Lam[at : at + k, at : at + k] = b
        at += k
    return Lam


def _verify_poles(A, B, K, poles, tol: float = 1.0e-6) -> None:
    got = np.sort_complex(np.linalg.eigvals(A + B @ K))
    want = np.sort_complex(np.asarray(poles, dtype=complex))
    # greedy nearest matching after the lexicographic sort
    err = np.abs(got - want).max()
    if err > tol:
        raise ConfigurationError(
            f"placed poles deviate by {err:.3g} (> {tol:.1g}) from the request"
        )


def equilibrium_control(A: np.ndarray, B: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha with A y + B alpha = 0, or InfeasibleTargetError if none exists."""
    A, B = _check_ab(A, B)
    y = np.asarray(y, dtype=float)
    alpha, _, _, _ = np.linalg.lstsq(B, -A @ y, rcond=None)
    residual = float(np.linalg.norm(A @ y + B @ alpha))
    if residual > 1.0e-8 * (1.0 + np.linalg.norm(A @ y)):
        raise InfeasibleTargetError(
            f"target is not an equilibrium: residual |Ay + B alpha| = {residual:.3g}"
        )
    return alpha


def feedback_steer_pair(
    A: np.ndarray,
    B: np.ndarray,
    K: np.ndarray,
    y: np.ndarray,
    x0: np.ndarray,
    T: float,
    n_grid: int = 2000,
    alpha_y: np.ndarray | None = None,
) -> TrajectoryControlPair:
    """Drive x' = Ax + Bu toward the equilibrium y with u = K(x - y) + alpha_y.

    Requires A + BK Hurwitz and y in the equilibrium set; the terminal error
    is recorded in the pair metadata (it decays like the slowest closed-loop
    mode, it is not forced to zero).
    """
    pairs = feedback_steer_pair_batch(
        A, B, K, np.asarray(y)[None, :], np.asarray(x0)[None, :], T, n_grid,
        None if alpha_y is None else np.asarray(alpha_y)[None, :],
    )
    return pairs[0]


def feedback_steer_pair_batch(
    A: np.ndarray,
    B: np.ndarray,
    K: np.ndarray,
    ys: np.ndarray,
    x0s: np.ndarray,
    T: float,
    n_grid: int = 2000,
    alphas: np.ndarray | None = None,
) -> list[TrajectoryControlPair]:
    """Vectorized :func:`feedback_steer_pair` over rows of ys/x0s."""
    A, B = _check_ab(A, B)
    K = np.asarray(K, dtype=float)
    d, m = A.shape[0], B.shape[1]
    if K.shape != (m, d):
        raise ConfigurationError(f"K must be ({m}, {d}), got {K.shape}")
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if ys.shape[0] != x0s.shape[0] or ys.shape[1] != d or x0s.shape[1] != d:
        raise ConfigurationError("ys and x0s must be matching (n, d) batches")
    eigs = np.linalg.eigvals(A + B @ K)
    if eigs.real.max() >= 0.0:
        raise UnstableGainError(
            f"A + BK is not Hurwitz (max real eigenvalue {eigs.real.max():.3g})"
        )
    if alphas is None:
        alphas = np.stack([equilibrium_control(A, B, y) for y in ys])
    else:
        alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
        for y, al in zip(ys, alphas):
            res = float(np.linalg.norm(A @ y + B @ al))
            if res > 1.0e-8 * (1.0 + np.linalg.norm(A @ y)):
                raise InfeasibleTargetError(
                    f"supplied alpha is not an equilibrium control (residual {res:.3g})"
                )

    t_grid = uniform_grid(T, n_grid)

    def field(t, x):
        u = (x - ys) @ K.T + alphas
        return x @ A.T + u @ B.T

    states, _ = rk4_field(field, x0s, t_grid, blowup=None)
    pairs = []
    for i in range(x0s.shape[0]):
        controls = (states[i] - ys[i]) @ K.T + alphas[i]
        err = float(np.linalg.norm(states[i, -1] - ys[i]))
        pairs.append(
            TrajectoryControlPair(
                t_grid, states[i], controls, meta={"terminal_error": err}
            )
        )
    return pairs


def brockett_steer_pair(
    x: np.ndarray, y: np.ndarray, n_grid: int = 4000
) -> TrajectoryControlPair:
    """Steer the Brockett system from x to y on the horizon [0, 4*pi].

    Phase 1 (constant controls) moves the first two coordinates linearly to
    their targets over [0, 2*pi].  Phase 2 applies u = (sin t, c cos t),
    which returns the first two coordinates to rest and advances the third
    by pi * c, with c = (y3 - omega3(2*pi)) / pi.
    """
    return brockett_steer_pair_batch(
        np.asarray(x)[None, :], np.asarray(y)[None, :], n_grid
    )[0]


def brockett_steer_pair_batch(
    xs: np.ndarray, ys: np.ndarray, n_grid: int = 4000
) -> list[TrajectoryControlPair]:
    """Vectorized :func:`brockett_steer_pair` over rows of xs/ys."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape != ys.shape or xs.shape[1] != 3:
        raise ConfigurationError("endpoints must be matching (n, 3) batches")
    n = xs.shape[0]
    if n_grid < 8:
        raise ConfigurationError("n_grid must be at least 8")
    if n_grid % 2:
        n_grid += 1
    K = n_grid
    T = 4.0 * np.pi
    t_grid = uniform_grid(T, K)
    half = K // 2
    sys = builtin_system("brockett")

    def rhs(xb, ub):
        return sys.rhs(xb, ub)

    # phase 1: constant controls over [0, 2*pi]
    t1 = t_grid[: half + 1]
    c12 = (ys[:, :2] - xs[:, :2]) / (2.0 * np.pi)  # (n, 2)
    u1_stages = np.broadcast_to(c12[:, None, :], (n, 2 * half + 1, 2)).copy()
    states1, _ = rk4_stage_controls(rhs, xs, t1, u1_stages, blowup=None)

    # phase 2: sinusoidal loop over (2*pi, 4*pi]
    omega_mid = states1[:, -1]
    c = (ys[:, 2] - omega_mid[:, 2]) / np.pi  # (n,)
    t2 = t_grid[half:]
    st2 = stage_times(t2)
    u2_stages = np.empty((n, len(st2), 2))
    u2_stages[:, :, 0] = np.sin(st2)[None, :]
    u2_stages[:, :, 1] = c[:, None] * np.cos(st2)[None, :]
    states2, _ = rk4_stage_controls(rhs, omega_mid, t2, u2_stages, blowup=None)

    pairs = []
    for i in range(n):
        states = np.vstack([states1[i], states2[i, 1:]])
        controls = np.vstack([u1_stages[i, 0::2], u2_stages[i, 0::2][1:]])
        err = float(np.linalg.norm(states[-1] - ys[i]))
        pairs.append(
            TrajectoryControlPair(
                t_grid,
                states,
                controls,
                meta={"endpoint_error": err, "loop_amplitude": float(c[i])},
            )
        )
    return pairs
