"""Homodyne data for dephased states and the photon-number estimator on those data.

Quadratures follow x = (a + a^+)/sqrt(2), so the vacuum has variance 1/2 and the Fock
wavefunctions are the Hermite functions. Detector efficiency enters as a Bernoulli
loss channel on the photon-number distribution; the estimator averages the unit
efficiency pattern functions and undoes the loss with the inverse channel.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import solve_triangular
from scipy.special import comb, dawsn
from scipy.stats import binom

from .errors import InvalidInputError, ThresholdError
from .fock_core import TAIL_TOL, DephasedState, EstimatedDistribution

logger = logging.getLogger(__name__)

PI_QUARTER = math.pi ** 0.25
CDF_NODES = 4096
CDF_MARGIN = 6.0
BERNOULLI_MARGIN = 8
FOURIER_NODES = 800
# absolute error allowed on f_nn before the recurrence hands over to the Fourier form
RECURRENCE_TOL = 1e-12
TABLE_MARGIN = 8.0
TABLE_NODES = 8192
ASYMPTOTIC_X = 40.0
EVAL_CHUNK = 1 << 16


def _check_efficiency(eta: float) -> None:
    if not 0.0 < eta <= 1.0:
        raise InvalidInputError(f"efficiency must lie in (0, 1], got {eta}")


@dataclass(frozen=True)
class HomodyneConfig:
    eta_h: float
    k_max: int
    samples_per_state: int
    blocks: int = 4
    bernoulli_margin: int = BERNOULLI_MARGIN

    def __post_init__(self):
        _check_efficiency(self.eta_h)
        if self.eta_h <= 0.5:
            raise ThresholdError(f"eta_h={self.eta_h} is at or below the threshold 1/2")
        if self.k_max < 0 or self.samples_per_state < 0 or self.bernoulli_margin < 0:
            raise InvalidInputError("k_max, samples_per_state and bernoulli_margin must be >= 0")
        if self.blocks < 2:
            raise InvalidInputError("at least 2 blocks are needed for block errors")

    @property
    def n_estimated(self) -> int:
        """Number of raw photon-number estimates formed before compensation."""
        if self.eta_h == 1.0:
            return self.k_max + 1
        return self.k_max + 1 + self.bernoulli_margin


@dataclass(frozen=True)
class QuadratureBatch:
    samples: np.ndarray
    block_id: int
    outcome_n: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float).ravel()
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("quadrature samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size


# ========================
# WAVEFUNCTIONS
# ========================

def _scaled_regular(n_max: int, x: np.ndarray) -> np.ndarray:
    """psi_n(x) exp(x^2/2) for n = 0..n_max, i.e. normalized Hermite polynomials."""
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 1.0 / PI_QUARTER
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(1, n_max):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def wavefunctions(n_max: int, x) -> np.ndarray:
    """Fock wavefunctions psi_0..psi_n_max on ``x``; shape (n_max + 1,) + x.shape."""
    if n_max < 0:
        raise InvalidInputError("n_max must be >= 0")
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = np.exp(-0.5 * x ** 2) / PI_QUARTER
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(1, n_max):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def wavefunction(n: int, x):
    return wavefunctions(n, x)[n]


# ========================
# PATTERN FUNCTIONS
# ========================

def _scaled_irregular(n_max: int, x: np.ndarray) -> np.ndarray:
    """phi_n(x) exp(-x^2/2) for the irregular solutions paired with psi_n."""
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 2.0 * PI_QUARTER * dawsn(x)
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * (x * out[0] - PI_QUARTER)
    for n in range(1, n_max):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def _pattern_fourier(n_max: int, x: np.ndarray) -> np.ndarray:
    """f_nn(x) = int_0^inf k exp(-k^2/4) L_n(k^2/2) cos(k x) dk for n = 0..n_max."""
    cutoff = math.sqrt(2.0 * (4 * n_max + 2)) + 12.0
    nodes, weights = np.polynomial.legendre.leggauss(FOURIER_NODES)
    k = 0.5 * cutoff * (nodes + 1.0)
    base = 0.5 * cutoff * weights * k * np.exp(-0.25 * k ** 2)
    y = 0.5 * k ** 2
    cosines = np.cos(np.outer(x, k))
    out = np.empty((n_max + 1, x.size))
    previous, current = np.zeros_like(y), np.ones_like(y)
    for n in range(n_max + 1):
        out[n] = cosines @ (base * current)
        previous, current = current, ((2 * n + 1 - y) * current - n * previous) / (n + 1)
    return out


def _pattern_asymptote(n_max: int, x: np.ndarray) -> np.ndarray:
    n = np.arange(n_max + 1)[:, None]
    return -1.0 / x ** 2 - (1.5 + 3.0 * n) / x ** 4


def pattern_functions(n_max: int, x) -> np.ndarray:
    """Diagonal pattern functions f_00..f_{n_max n_max} on ``x``.

    f_nn is the derivative of psi_n phi_n with phi_n the irregular solution. The upward
    recurrence for phi_n amplifies rounding like psi_n^2 away from the origin; points
    where that error would exceed RECURRENCE_TOL are evaluated from the Fourier form.
    """
    if n_max < 0:
        raise InvalidInputError("n_max must be >= 0")
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    psi = _scaled_regular(n_max + 1, flat)
    phi = _scaled_irregular(n_max + 1, flat)
    out = np.empty((n_max + 1, flat.size))
    out[0] = 2.0 - 4.0 * flat * dawsn(flat)
    for n in range(1, n_max + 1):
        d_psi = (math.sqrt(n) * psi[n - 1] - math.sqrt(n + 1) * psi[n + 1]) / math.sqrt(2.0)
        d_phi = (math.sqrt(n) * phi[n - 1] - math.sqrt(n + 1) * phi[n + 1]) / math.sqrt(2.0)
        out[n] = d_psi * phi[n] + psi[n] * d_phi

    # rounding in phi_0, phi_1 re-enters along psi_n with weight |phi_0 phi_1|
    seed_error = np.finfo(float).eps * np.abs(phi[0] * phi[1])
    envelope = np.maximum.accumulate(psi[1:] ** 2 + psi[:-1] ** 2, axis=0)
    error = seed_error * envelope * np.arange(1, n_max + 2)[:, None]
    unstable = np.any(error[1:] > RECURRENCE_TOL, axis=0) if n_max >= 1 else np.zeros(flat.size, bool)
    far = np.abs(flat) > ASYMPTOTIC_X
    fourier = unstable & ~far
    if np.any(fourier):
        out[:, fourier] = _pattern_fourier(n_max, flat[fourier])
    if np.any(far):
        out[:, far] = _pattern_asymptote(n_max, flat[far])
    return out.reshape((n_max + 1,) + x.shape)


def pattern_function(n: int, x):
    return pattern_functions(n, x)[n]


def biorthogonality_matrix(n_max: int, nodes: int = 200) -> np.ndarray:
    """Gauss-Hermite estimate of int f_nn(x) psi_m(x)^2 dx for n, m <= n_max."""
    grid, weights = np.polynomial.hermite.hermgauss(nodes)
    # psi_m^2 = exp(-x^2) h_m^2 with h_m the normalized Hermite polynomials
    squared = _scaled_regular(n_max, grid) ** 2
    return (pattern_functions(n_max, grid) * weights) @ squared.T


def pattern_function_linear_system(n: int, x, n_basis: Optional[int] = None, nodes: int = 200):
    """Polynomial kernel biorthogonal to psi_m^2 for m < n_basis, built on a Gauss-Hermite grid.

    Expands the kernel in even normalized Hermite polynomials h_2j; the system
    int h_2j psi_m^2 = A[m, j] is lower triangular.
    """
    n_basis = n + 1 if n_basis is None else n_basis
    if not 0 <= n < n_basis:
        raise InvalidInputError("need 0 <= n < n_basis")
    if 4 * (n_basis - 1) >= 2 * nodes:
        raise InvalidInputError(f"{nodes} quadrature nodes cannot integrate {n_basis} basis terms")
    grid, weights = np.polynomial.hermite.hermgauss(nodes)
    regular = _scaled_regular(2 * (n_basis - 1), grid)
    a = np.einsum("i,ji,mi->mj", weights, regular[0::2], regular[: n_basis] ** 2)
    rhs = np.zeros(n_basis)
    rhs[n] = 1.0
    coefficients = solve_triangular(a, rhs, lower=True)
    x = np.asarray(x, dtype=float)
    basis = _scaled_regular(2 * (n_basis - 1), x)[0::2]
    return np.tensordot(coefficients, basis, axes=1)


@dataclass(frozen=True)
class PatternTable:
    """Spline tables of f_nn on [-x_max, x_max] for fast evaluation on large samples."""

    n_max: int
    x_max: float
    splines: CubicSpline

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        out = np.empty((self.n_max + 1, x.size))
        inside = np.abs(x) <= self.x_max
        out[:, inside] = self.splines(x[inside]).T
        if not np.all(inside):
            out[:, ~inside] = pattern_functions(self.n_max, x[~inside])
        return out


@lru_cache(maxsize=8)
def pattern_table(n_max: int) -> PatternTable:
    x_max = math.sqrt(2 * n_max + 1) + TABLE_MARGIN
    grid = np.linspace(-x_max, x_max, TABLE_NODES)
    logger.debug("tabulating pattern functions up to n=%d on |x| <= %.2f", n_max, x_max)
    values = pattern_functions(n_max, grid)
    return PatternTable(n_max, x_max, CubicSpline(grid, values.T, axis=0))


# ========================
# SAMPLING
# ========================

@lru_cache(maxsize=256)
def _inverse_cdf(n: int) -> PchipInterpolator:
    x_max = math.sqrt(2 * n + 1) + CDF_MARGIN
    grid = np.linspace(-x_max, x_max, CDF_NODES)
    density = wavefunction(n, grid) ** 2
    cdf = cumulative_trapezoid(density, grid, initial=0.0)
    cdf /= cdf[-1]
    keep = np.concatenate(([True], np.diff(cdf) > 0))
    return PchipInterpolator(cdf[keep], grid[keep])


class QuadratureSampler:
    """Inverse-CDF sampler of |psi_n(x)|^2; tables are built once per n and shared."""

    def draw(self, n: int, uniforms: np.ndarray) -> np.ndarray:
        if n < 0:
            raise InvalidInputError("Fock number must be >= 0")
        return _inverse_cdf(int(n))(uniforms)

    def draw_mixture(self, numbers: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        out = np.empty(numbers.size)
        for n in np.unique(numbers):
            mask = numbers == n
            out[mask] = self.draw(int(n), uniforms[mask])
        return out


def sample_quadratures(
    state: DephasedState, eta_h: float, rng: np.random.Generator, size: int
) -> np.ndarray:
    _check_efficiency(eta_h)
    if size < 0:
        raise InvalidInputError("size must be >= 0")
    total = state.probs.sum()
    if total <= 0:
        raise InvalidInputError("state carries no probability")
    if 1.0 - total > TAIL_TOL:
        logger.warning("sampling a truncated state with %.3e of probability missing", 1.0 - total)
    weights = np.clip(state.probs, 0.0, None)
    numbers = rng.choice(state.dim, size=size, p=weights / weights.sum())
    uniforms = rng.random(size)
    x = QuadratureSampler().draw_mixture(numbers, uniforms)
    noise = rng.standard_normal(size)
    return math.sqrt(eta_h) * x + math.sqrt(0.5 * (1.0 - eta_h)) * noise


def sample_quadrature(state: DephasedState, eta_h: float, rng: np.random.Generator) -> float:
    return float(sample_quadratures(state, eta_h, rng, 1)[0])


# ========================
# EFFICIENCY COMPENSATION
# ========================

def bernoulli(r, eta: float) -> np.ndarray:
    """Photon-number distribution after loss with survival probability ``eta``."""
    _check_efficiency(eta)
    r = np.asarray(r, dtype=float)
    m = np.arange(r.size)
    return binom.pmf(m[:, None], m[None, :], eta) @ r


def inverse_bernoulli(r_prime, eta: float, k_max: int) -> np.ndarray:
    """Undo Bernoulli loss on a distribution truncated at ``len(r_prime) - 1``."""
    _check_efficiency(eta)
    if eta <= 0.5:
        raise ThresholdError(f"loss inversion diverges for eta={eta} <= 1/2")
    r_prime = np.asarray(r_prime, dtype=float)
    if k_max < 0 or k_max >= r_prime.size:
        raise InvalidInputError(f"k_max={k_max} outside the supplied range 0..{r_prime.size - 1}")
    n = np.arange(k_max + 1)[:, None]
    m = np.arange(r_prime.size)[None, :]
    power = np.where(m >= n, m - n, 0)
    kernel = np.where(m >= n, comb(m, n) * eta ** (-n) * (1.0 - 1.0 / eta) ** power, 0.0)
    return kernel @ r_prime


# ========================
# ESTIMATION
# ========================

def pattern_means(samples: np.ndarray, n_max: int) -> np.ndarray:
    """Sample average of f_00..f_{n_max n_max}; zeros for an empty sample."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        return np.zeros(n_max + 1)
    table = pattern_table(n_max)
    total = np.zeros(n_max + 1)
    for start in range(0, samples.size, EVAL_CHUNK):
        total += table.evaluate(samples[start:start + EVAL_CHUNK]).sum(axis=1)
    return total / samples.size


def compensate_blocks(block_means: Sequence[np.ndarray], cfg: HomodyneConfig) -> np.ndarray:
    """Per-block estimates of r_0..r_{k_max}, each compensated for eta_h; shape (blocks, k_max + 1)."""
    if len(block_means) < 2:
        raise InvalidInputError(f"need at least 2 non-empty blocks, got {len(block_means)}")
    if len(block_means) < cfg.blocks:
        logger.warning("only %d of %d blocks carry data", len(block_means), cfg.blocks)
    return np.array([inverse_bernoulli(r, cfg.eta_h, cfg.k_max) for r in block_means])


def summarize_blocks(compensated: np.ndarray) -> EstimatedDistribution:
    """Block mean and its standard error."""
    compensated = np.asarray(compensated, dtype=float)
    values = compensated.mean(axis=0)
    sigma = compensated.std(axis=0, ddof=1) / math.sqrt(compensated.shape[0])
    return EstimatedDistribution(values, sigma)


def combine_blocks(block_means: Sequence[np.ndarray], cfg: HomodyneConfig) -> EstimatedDistribution:
    """Compensate each block for eta_h, then form the block mean and its standard error."""
    return summarize_blocks(compensate_blocks(block_means, cfg))


def estimate_diagonal(batches: Iterable[QuadratureBatch], cfg: HomodyneConfig) -> EstimatedDistribution:
    batches = [batch for batch in batches if len(batch)]
    outcomes = {batch.outcome_n for batch in batches}
    if len(outcomes) > 1:
        raise InvalidInputError(f"batches mix conditioning outcomes {sorted(outcomes)}")
    means: List[np.ndarray] = [
        pattern_means(batch.samples, cfg.n_estimated - 1)
        for batch in sorted(batches, key=lambda b: b.block_id)
    ]
    return combine_blocks(means, cfg)
