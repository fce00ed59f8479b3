"""Theoretical device models: the phase-insensitive amplifier and the one-atom laser.

Joint atom-field operators act on a 2N-dimensional space ordered as
``index = atom * N + photon`` with atom 0 = ground, atom 1 = excited.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp
from scipy.stats import binom

from .errors import BranchFailureError, IntegrationError, InvalidInputError, NumericalError
from .fock_core import GreenMatrix, LiouvillianMatrix, matrix_exp, matrix_log
from .parallel import STREAM_QJUMP, ordered_map, substream

logger = logging.getLogger(__name__)

ODE_RTOL = 1e-8
ODE_ATOL = 1e-10
QJUMP_CHUNK = 1000
BISECTION_STEPS = 48


class AtomInit(str, Enum):
    EXCITED = "excited"
    GROUND = "ground"
    INVERSION_STEADY_STATE = "inversion_steady_state"


class ExtractionMethod(str, Enum):
    MATRIX_LOG = "matrix_log"
    FINITE_DIFFERENCE = "finite_difference"


def dissipator(theta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad form D[theta] rho = theta rho theta^+ - {theta^+ theta, rho} / 2."""
    theta_dag = theta.conj().T
    number = theta_dag @ theta
    return theta @ rho @ theta_dag - 0.5 * (number @ rho + rho @ number)


# ========================
# PHASE-INSENSITIVE AMPLIFIER
# ========================

@dataclass(frozen=True)
class PiaParams:
    a_gain: float
    b_loss: float
    tau: float = 1.0

    def __post_init__(self):
        for name in ("a_gain", "b_loss"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")
        if not math.isfinite(self.tau) or self.tau <= 0:
            raise InvalidInputError(f"tau must be finite and > 0, got {self.tau}")


def build_pia(p: PiaParams, dim: int) -> LiouvillianMatrix:
    if dim < 2:
        raise InvalidInputError("the amplifier needs dim >= 2")
    m = np.arange(dim, dtype=float)
    emission = 2.0 * p.a_gain * (m + 1.0)  # |m> -> |m+1>
    absorption = 2.0 * p.b_loss * m  # |m> -> |m-1>
    l = np.zeros((dim, dim))
    l[np.arange(1, dim), np.arange(dim - 1)] = emission[:-1]
    l[np.arange(dim - 1), np.arange(1, dim)] = absorption[1:]
    l[np.arange(dim), np.arange(dim)] = -(emission + absorption)
    return LiouvillianMatrix(l)


def pia_green(p: PiaParams, dim: int) -> GreenMatrix:
    return matrix_exp(build_pia(p, dim), p.tau)


# ========================
# ONE-ATOM LASER
# ========================

@dataclass(frozen=True)
class LaserParams:
    c_coop: float
    n_sat: float
    sigma0: float
    f_ratio: float
    gamma_cav: float
    t_star: float
    coupling_scale: float = 1.0

    def __post_init__(self):
        if not -1.0 <= self.sigma0 <= 1.0:
            raise InvalidInputError(f"sigma0 must lie in [-1, 1], got {self.sigma0}")
        if not math.isfinite(self.t_star) or self.t_star < 0:
            raise InvalidInputError(f"t_star must be finite and >= 0, got {self.t_star}")
        if self.coupling_scale < 0:
            raise InvalidInputError("coupling_scale must be >= 0")
        _, gamma_perp, gamma_par = laser_rates(self)
        if 0 < self.t_star * max(gamma_par, gamma_perp) < 1.0:
            logger.warning(
                "t_star=%g is not long compared with the atomic decay times "
                "(t_star * max rate = %.3g)", self.t_star, self.t_star * max(gamma_par, gamma_perp),
            )

    @property
    def coupling(self) -> float:
        return laser_rates(self)[0] * self.coupling_scale


def laser_rates(p: LaserParams) -> Tuple[float, float, float]:
    """Solve C = g^2/(gamma gamma_perp), n_s = gamma_par gamma_perp/(4 g^2), f = gamma_par/(2 gamma_perp)."""
    for name in ("c_coop", "n_sat", "f_ratio", "gamma_cav"):
        value = getattr(p, name)
        if not math.isfinite(value) or value <= 0:
            raise InvalidInputError(f"{name} must be finite and > 0, got {value}")
    gamma_perp = 2.0 * p.c_coop * p.gamma_cav * p.n_sat / p.f_ratio
    gamma_par = 2.0 * p.f_ratio * gamma_perp
    g = math.sqrt(p.c_coop * p.gamma_cav * gamma_perp)
    return g, gamma_perp, gamma_par


def _annihilation(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1)


SIGMA_PLUS = np.array([[0.0, 0.0], [1.0, 0.0]])
SIGMA_MINUS = SIGMA_PLUS.T.copy()
SIGMA_Z = np.diag([-1.0, 1.0])


@dataclass(frozen=True)
class LaserGenerator:
    """Joint atom-field master equation d rho/dt = -i[H, rho] + sum_k rate_k D[C_k] rho."""

    dim: int
    hamiltonian: np.ndarray
    jump_ops: Tuple[np.ndarray, ...]
    jump_rates: Tuple[float, ...]
    jump_names: Tuple[str, ...]

    @property
    def joint_dim(self) -> int:
        return 2 * self.dim

    def apply_coherent(self, rho: np.ndarray) -> np.ndarray:
        h = self.hamiltonian
        return -1j * (h @ rho - rho @ h)

    def apply_dissipative(self, rho: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rho, dtype=complex)
        for rate, op in zip(self.jump_rates, self.jump_ops):
            out += rate * dissipator(op, rho)
        return out

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Generator action; ``rho`` may carry leading batch axes."""
        return self.apply_coherent(rho) + self.apply_dissipative(rho)

    def superoperator(self) -> np.ndarray:
        """Dense map acting on row-major flattened density operators."""
        d = self.joint_dim
        eye = np.eye(d)
        h = self.hamiltonian
        sup = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
        for rate, op in zip(self.jump_rates, self.jump_ops):
            number = op.conj().T @ op
            sup = sup + rate * (
                np.kron(op, op.conj()) - 0.5 * np.kron(number, eye) - 0.5 * np.kron(eye, number.T)
            )
        return sup

    def effective_hamiltonian(self) -> np.ndarray:
        h_eff = self.hamiltonian.astype(complex)
        for rate, op in zip(self.jump_rates, self.jump_ops):
            h_eff = h_eff - 0.5j * rate * (op.conj().T @ op)
        return h_eff


def build_laser_generator(p: LaserParams, dim: int) -> LaserGenerator:
    if dim < 2:
        raise InvalidInputError("the laser model needs dim >= 2")
    _, gamma_perp, gamma_par = laser_rates(p)
    a = np.kron(np.eye(2), _annihilation(dim))
    s_plus = np.kron(SIGMA_PLUS, np.eye(dim))
    s_minus = np.kron(SIGMA_MINUS, np.eye(dim))
    s_z = np.kron(SIGMA_Z, np.eye(dim))

    # g [X, rho] with X = s+ a - s- a^+ anti-Hermitian equals -i [H, rho] for H = i g X
    exchange = s_plus @ a - s_minus @ a.T
    hamiltonian = 1j * p.coupling * exchange

    dephasing = 0.25 * (gamma_perp - 0.5 * gamma_par)
    if dephasing < 0:
        logger.warning(
            "dephasing coefficient %.4g is negative (f_ratio > 1); the master equation "
            "is not of Lindblad form", dephasing,
        )
    channels = [
        ("pump", 0.5 * gamma_par * (1.0 + p.sigma0), s_plus),
        ("atomic_decay", 0.5 * gamma_par * (1.0 - p.sigma0), s_minus),
        ("dephasing", dephasing, s_z),
        ("cavity_loss", p.gamma_cav, a),
    ]
    kept = [(name, rate, op) for name, rate, op in channels if rate != 0.0]
    return LaserGenerator(
        dim=dim,
        hamiltonian=hamiltonian,
        jump_ops=tuple(op.astype(complex) for _, _, op in kept),
        jump_rates=tuple(float(rate) for _, rate, _ in kept),
        jump_names=tuple(name for name, _, _ in kept),
    )


def atom_populations(p: LaserParams, atom_init: AtomInit) -> np.ndarray:
    """(ground, excited) populations of the atom entering the cavity."""
    atom_init = AtomInit(atom_init)
    if atom_init is AtomInit.EXCITED:
        return np.array([0.0, 1.0])
    if atom_init is AtomInit.GROUND:
        return np.array([1.0, 0.0])
    # field-free balance of pump and decay has inversion sigma0
    return np.array([0.5 * (1.0 - p.sigma0), 0.5 * (1.0 + p.sigma0)])


def bernoulli_loss_green(gamma: float, t: float, dim: int) -> GreenMatrix:
    """Closed-form green matrix of pure cavity loss gamma D[a] after time t."""
    survival = math.exp(-gamma * t)
    k = np.arange(dim)[:, None]
    m = np.arange(dim)[None, :]
    return GreenMatrix(binom.pmf(k, m, survival), t)


def _computed_columns(dim: int, guard: int) -> int:
    if not 0 <= guard < dim:
        raise InvalidInputError(f"guard must lie in 0..{dim - 1}, got {guard}")
    return dim - guard


def laser_green_ode(
    p: LaserParams,
    dim: int,
    atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE,
    rtol: float = ODE_RTOL,
    atol: float = ODE_ATOL,
    guard: int = 0,
) -> GreenMatrix:
    """Green matrix of the laser by integrating the joint master equation.

    Only inputs m < dim - guard are propagated; gain pushes the others across the
    truncation, and their columns are left at zero.
    """
    columns = _computed_columns(dim, guard)
    if p.t_star == 0:
        return GreenMatrix(np.eye(dim), 0.0)
    generator = build_laser_generator(p, dim)
    d = generator.joint_dim
    populations = atom_populations(p, atom_init)

    rho0 = np.zeros((columns, d, d), dtype=complex)
    for m in range(columns):
        for atom in (0, 1):
            rho0[m, atom * dim + m, atom * dim + m] = populations[atom]

    def rhs(_t, y):
        return generator.apply(y.reshape(columns, d, d)).ravel()

    solution = solve_ivp(
        rhs, (0.0, p.t_star), rho0.ravel(), method="DOP853",
        rtol=rtol, atol=atol, t_eval=[p.t_star],
    )
    if not solution.success:
        raise IntegrationError(
            "master-equation integration failed",
            {"message": solution.message, "nfev": solution.nfev, "t_star": p.t_star},
        )
    logger.debug("laser ODE: %d right-hand-side evaluations", solution.nfev)

    rho_t = solution.y[:, -1].reshape(columns, 2, dim, 2, dim)
    field = np.einsum("maiak->mik", rho_t)
    g = np.zeros((dim, dim))
    g[:, :columns] = np.real(np.einsum("mkk->km", field))
    return GreenMatrix(g, p.t_star)


# ========================
# QUANTUM-JUMP UNRAVELING
# ========================

@dataclass(frozen=True)
class _JumpKernel:
    """Eigen-decomposed no-jump propagator plus scaled collapse operators."""

    dim: int
    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    collapse: np.ndarray


def _jump_kernel(generator: LaserGenerator) -> _JumpKernel:
    for name, rate in zip(generator.jump_names, generator.jump_rates):
        if rate < 0:
            raise InvalidInputError(f"channel '{name}' has negative rate {rate}; it cannot be unraveled")
    eigenvalues, right = linalg.eig(generator.effective_hamiltonian())
    condition = np.linalg.cond(right)
    if not np.isfinite(condition) or condition > 1e10:
        raise NumericalError(f"effective Hamiltonian is not safely diagonalizable (cond={condition:.3e})")
    collapse = np.array([math.sqrt(rate) * op for rate, op in zip(generator.jump_rates, generator.jump_ops)])
    return _JumpKernel(generator.dim, eigenvalues, right, np.linalg.inv(right), collapse)


def _run_trajectories(task) -> Tuple[int, np.ndarray, np.ndarray]:
    kernel, m, populations, t_star, count, seed, chunk = task
    rng = substream(seed, STREAM_QJUMP, m, chunk)
    dim = kernel.dim
    lam = kernel.eigenvalues

    psi = np.zeros((count, 2 * dim), dtype=complex)
    excited = rng.random(count) < populations[1]
    psi[np.arange(count), np.where(excited, dim + m, m)] = 1.0
    t_left = np.full(count, float(t_star))
    active = np.ones(count, dtype=bool)

    def evolve(coeffs, s):
        return (coeffs * np.exp(-1j * lam[None, :] * s[:, None])) @ kernel.right.T

    while active.any():
        idx = np.flatnonzero(active)
        coeffs = psi[idx] @ kernel.left.T
        threshold = rng.random(idx.size)
        end_state = evolve(coeffs, t_left[idx])
        jumps = np.sum(np.abs(end_state) ** 2, axis=1) < threshold

        settled = idx[~jumps]
        final = end_state[~jumps]
        psi[settled] = final / np.linalg.norm(final, axis=1, keepdims=True)
        active[settled] = False
        if not jumps.any():
            break

        jumping = idx[jumps]
        jump_coeffs = coeffs[jumps]
        target = threshold[jumps]
        lo = np.zeros(jumping.size)
        hi = t_left[jumping].copy()
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            decayed = np.sum(np.abs(evolve(jump_coeffs, mid)) ** 2, axis=1) < target
            hi = np.where(decayed, mid, hi)
            lo = np.where(decayed, lo, mid)
        before = evolve(jump_coeffs, hi)
        before /= np.linalg.norm(before, axis=1, keepdims=True)

        branches = np.einsum("kij,bj->bki", kernel.collapse, before)
        weights = np.sum(np.abs(branches) ** 2, axis=2)
        cumulative = np.cumsum(weights, axis=1)
        pick = rng.random(jumping.size) * cumulative[:, -1]
        channel = np.minimum((cumulative < pick[:, None]).sum(axis=1), weights.shape[1] - 1)
        after = branches[np.arange(jumping.size), channel]
        psi[jumping] = after / np.linalg.norm(after, axis=1, keepdims=True)
        t_left[jumping] -= hi

    photon = np.abs(psi[:, :dim]) ** 2 + np.abs(psi[:, dim:]) ** 2
    return count, photon.sum(axis=0), (photon ** 2).sum(axis=0)


def laser_green_qjump(
    p: LaserParams,
    dim: int,
    atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE,
    n_traj: int = 10_000,
    seed: int = 0,
    workers: int = 1,
    guard: int = 0,
) -> Tuple[GreenMatrix, np.ndarray]:
    """Monte Carlo wave-function estimate of the laser green matrix and its standard errors.

    The atom is traced out once per trajectory at ``t_star``. Trajectories are split in
    fixed chunks keyed by (input m, chunk index), so any worker count gives the same result.
    Inputs m >= dim - guard are not simulated. The standard error never drops below that
    of a binomial proportion with no observed events, so entries no trajectory reached
    still carry an uncertainty.
    """
    if n_traj < 1:
        raise InvalidInputError("n_traj must be >= 1")
    columns = _computed_columns(dim, guard)
    if p.t_star == 0:
        return GreenMatrix(np.eye(dim), 0.0), np.zeros((dim, dim))
    kernel = _jump_kernel(build_laser_generator(p, dim))
    populations = atom_populations(p, atom_init)

    tasks = []
    for m in range(columns):
        for chunk, start in enumerate(range(0, n_traj, QJUMP_CHUNK)):
            count = min(QJUMP_CHUNK, n_traj - start)
            tasks.append((kernel, m, populations, p.t_star, count, seed, chunk))
    logger.info("quantum-jump run: %d trajectories per input over %d chunks", n_traj, len(tasks))
    results = ordered_map(_run_trajectories, tasks, workers)

    totals = np.zeros((dim, dim))
    squares = np.zeros((dim, dim))
    for (_, m, *_rest), (_, total, square) in zip(tasks, results):
        totals[:, m] += total
        squares[:, m] += square
    mean = totals / n_traj
    if n_traj > 1:
        variance = np.maximum(squares / n_traj - mean ** 2, 0.0) * n_traj / (n_traj - 1)
    else:
        variance = np.zeros_like(mean)
    stderr = np.sqrt(np.maximum(variance / n_traj, qjump_stderr_floor(n_traj) ** 2))
    stderr[:, columns:] = 0.0
    return GreenMatrix(mean, p.t_star), stderr


def qjump_stderr_floor(n_traj: int) -> float:
    """Standard error of a proportion with zero events in ``n_traj`` trials, Agresti-Coull style."""
    adjusted = n_traj + 4
    p_tilde = 2.0 / adjusted
    return math.sqrt(p_tilde * (1.0 - p_tilde) / adjusted)


# ========================
# EFFECTIVE LIOUVILLIAN
# ========================

def effective_liouvillian(
    g: GreenMatrix, method: ExtractionMethod = ExtractionMethod.MATRIX_LOG
) -> LiouvillianMatrix:
    if g.tau <= 0:
        raise InvalidInputError("effective_liouvillian needs a green matrix with tau > 0")
    method = ExtractionMethod(method)
    if method is ExtractionMethod.MATRIX_LOG:
        try:
            return matrix_log(g)
        except BranchFailureError as exc:
            raise BranchFailureError(f"{exc}; retry with method='finite_difference'") from exc
    return LiouvillianMatrix((g.g - np.eye(g.dim)) / g.tau, validate=False)

