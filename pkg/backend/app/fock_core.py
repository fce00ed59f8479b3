"""Truncated Fock-space linear algebra on the photon-number-diagonal sector.

Index convention shared by every matrix in the package: ``matrix[k, m]`` maps the
input Fock number ``m`` (column) to the output Fock number ``k`` (row).
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import BranchFailureError, InvalidInputError

logger = logging.getLogger(__name__)

TAIL_TOL = 1e-6
TAIL_TOL_RATE = 1e-6
DEFAULT_GUARD = 4
# round-off allowance for entries that are nonnegative in exact arithmetic
NEGATIVE_TOL = 1e-9


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    array.setflags(write=False)
    return array


def _square(values, name: str) -> np.ndarray:
    array = _frozen_array(values, 2, name)
    if array.shape[0] != array.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {array.shape}")
    return array


# ========================
# DOMAIN TYPES
# ========================

@dataclass(frozen=True)
class DephasedState:
    """Photon-number distribution of a density matrix diagonal in the Fock basis."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen_array(self.probs, 1, "probs")
        if probs.size == 0:
            raise InvalidInputError("a dephased state needs at least one Fock level")
        if probs.min() < -NEGATIVE_TOL:
            raise InvalidInputError(f"negative probability {probs.min():.3e} in dephased state")
        if probs.sum() > 1.0 + NEGATIVE_TOL:
            raise InvalidInputError(f"probabilities sum to {probs.sum():.12f} > 1")
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self) -> int:
        return self.probs.size

    @property
    def leakage(self) -> float:
        return float(1.0 - self.probs.sum())

    def check_normalized(self, tail_tol: float = TAIL_TOL) -> None:
        if self.leakage > tail_tol:
            raise InvalidInputError(
                f"dephased state lost {self.leakage:.3e} of probability to truncation "
                f"(tolerance {tail_tol:.1e})"
            )


@dataclass(frozen=True)
class EstimatedDistribution:
    """Estimated photon-number distribution; entries may fluctuate negative."""

    values: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        values = _frozen_array(self.values, 1, "values")
        object.__setattr__(self, "values", values)
        if self.sigma is not None:
            sigma = _frozen_array(self.sigma, 1, "sigma")
            if sigma.shape != values.shape:
                raise InvalidInputError("sigma and values must have the same length")
            if sigma.min() < 0:
                raise InvalidInputError("sigma must be nonnegative")
            object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class GreenMatrix:
    """Diagonal sector G[k, m] = <k| G[|m><m|] |k> of a finite-time evolution."""

    g: np.ndarray
    tau: float
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        g = _square(self.g, "green matrix")
        if not np.isfinite(self.tau) or self.tau < 0:
            raise InvalidInputError(f"propagation time must be finite and >= 0, got {self.tau}")
        if self.validate:
            if g.min() < -NEGATIVE_TOL:
                raise InvalidInputError(f"green matrix has negative entry {g.min():.3e}")
            worst = g.sum(axis=0).max()
            if worst > 1.0 + 1e-7:
                raise InvalidInputError(f"green matrix column sums to {worst:.12f} > 1")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def leakage(self) -> np.ndarray:
        return 1.0 - self.g.sum(axis=0)

    def warn_leakage(self, guard: int = DEFAULT_GUARD, tail_tol: float = TAIL_TOL) -> None:
        inside = self.leakage()[: max(self.dim - guard, 0)]
        if inside.size and inside.max() > tail_tol:
            logger.warning(
                "green matrix leaks %.3e of probability inside the guarded block "
                "(guard=%d, dim=%d); consider a larger dimension",
                inside.max(), guard, self.dim,
            )


@dataclass(frozen=True)
class LiouvillianMatrix:
    """Generator L[n, m] of the diagonal-sector dynamics, d p / dt = L p."""

    l: np.ndarray
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        l = _square(self.l, "liouvillian")
        if self.validate:
            off = l - np.diag(np.diag(l))
            if off.min() < -NEGATIVE_TOL:
                raise InvalidInputError(f"liouvillian has negative off-diagonal {off.min():.3e}")
            worst = l.sum(axis=0).max()
            if worst > TAIL_TOL_RATE:
                raise InvalidInputError(f"liouvillian column sums to {worst:.3e} > 0")
        object.__setattr__(self, "l", l)

    @property
    def dim(self) -> int:
        return self.l.shape[0]


# ========================
# STATE HELPERS
# ========================

def fock_state(n: int, dim: int) -> DephasedState:
    if not 0 <= n < dim:
        raise InvalidInputError(f"Fock number {n} outside truncation dim {dim}")
    probs = np.zeros(dim)
    probs[n] = 1.0
    return DephasedState(probs)


def thermal_state(mean: float, dim: int) -> DephasedState:
    if mean < 0:
        raise InvalidInputError("thermal mean photon number must be >= 0")
    ratio = mean / (1.0 + mean)
    return DephasedState((1.0 - ratio) * ratio ** np.arange(dim))


def mean_photon_number(state: DephasedState) -> float:
    return float(np.arange(state.dim) @ state.probs)


def guarded_block(matrix: np.ndarray, guard: int) -> np.ndarray:
    size = matrix.shape[0] - guard
    if size < 1:
        raise InvalidInputError(f"guard {guard} leaves no valid block of a {matrix.shape[0]}-dim matrix")
    return matrix[:size, :size]


# ========================
# OPERATIONS
# ========================

def matrix_exp(l: LiouvillianMatrix, tau: float) -> GreenMatrix:
    if not np.isfinite(tau) or tau < 0:
        raise InvalidInputError(f"tau must be finite and >= 0, got {tau}")
    g = linalg.expm(l.l * tau)
    return GreenMatrix(g, tau, validate=l.validate)


def matrix_log(g: GreenMatrix) -> LiouvillianMatrix:
    """Principal logarithm of ``g`` divided by its propagation time."""
    if g.tau <= 0:
        raise InvalidInputError("matrix_log needs a green matrix with tau > 0")
    eigenvalues = np.linalg.eigvals(g.g)
    scale = max(1.0, float(np.abs(eigenvalues).max()))
    on_cut = (np.abs(eigenvalues.imag) <= 1e-12 * scale) & (eigenvalues.real <= 1e-14 * scale)
    if np.any(on_cut):
        raise BranchFailureError(
            "green matrix has eigenvalues on the closed negative real axis "
            f"({eigenvalues[on_cut].real.tolist()}); use finite-difference extraction"
        )
    log_g = linalg.logm(g.g)
    if np.iscomplexobj(log_g):
        imaginary = float(np.abs(log_g.imag).max())
        if imaginary > 1e-8 * max(1.0, float(np.abs(log_g.real).max())):
            raise BranchFailureError(
                f"principal logarithm is not real (max imaginary part {imaginary:.3e})"
            )
        log_g = log_g.real
    return LiouvillianMatrix(log_g / g.tau, validate=False)


def apply_green(g: GreenMatrix, s: DephasedState) -> DephasedState:
    if g.dim != s.dim:
        raise InvalidInputError(f"green matrix dim {g.dim} does not match state dim {s.dim}")
    out = g.g @ s.probs
    # round-off can push exact zeros a hair below zero
    out = np.where((out < 0) & (out > -NEGATIVE_TOL), 0.0, out)
    if out.sum() > s.probs.sum() + 1e-12:
        logger.warning("green matrix created probability: %.3e", out.sum() - s.probs.sum())
    return DephasedState(out)
