"""Small dense linear-algebra kernels used by the interpolant constructions."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

# Pade(6,6) numerator coefficients for exp(z); the denominator uses the same
# coefficients with alternating signs.
_PADE6 = np.array(
    [
        1.0,
        1.0 / 2.0,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ]
)


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Pade(6) core.

    The argument is halved until its 1-norm is at most 0.5, the rational
    approximant is evaluated there, and the result is squared back up.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigurationError(f"expm expects a square matrix, got shape {A.shape}")
    d = A.shape[0]
    norm = np.linalg.norm(A, 1)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        A = A / (2.0**squarings)

    powers = [np.eye(d)]
    for _ in range(6):
        powers.append(powers[-1] @ A)
    num = sum(c * P for c, P in zip(_PADE6, powers))
    den = sum(c * P for c, P in zip(_PADE6 * (-1.0) ** np.arange(7), powers))
    E = np.linalg.solve(den, num)
    for _ in range(squarings):
        E = E @ E
    return E


def kalman_rank(A: np.ndarray, B: np.ndarray) -> int:
    """Numeric rank of the controllability matrix [B, AB, ..., A^(d-1)B]."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    d = A.shape[0]
    if A.shape != (d, d) or B.shape[0] != d:
        raise ConfigurationError(
            f"incompatible shapes A{A.shape}, B{B.shape} for controllability test"
        )
    blocks = [B]
    for _ in range(d - 1):
        blocks.append(A @ blocks[-1])
    C = np.hstack(blocks)
    return int(np.linalg.matrix_rank(C))


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[B, AB, ..., A^(d-1)B] as a dense matrix."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)
