"""Monte Carlo orchestration: simulate conditioned homodyne data, invert to the green
matrix, extract the Liouvillian and compare it with the device model."""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import expm_frechet
from scipy.stats import chi2

from . import serialization
from .devices import (
    AtomInit,
    ExtractionMethod,
    LaserParams,
    PiaParams,
    build_pia,
    effective_liouvillian,
    laser_green_ode,
    laser_green_qjump,
    pia_green,
)
from .errors import (
    BranchFailureError,
    ConfigError,
    IncompleteDataError,
    InvalidInputError,
    NumericalError,
)
from .fock_core import (
    DEFAULT_GUARD,
    DephasedState,
    EstimatedDistribution,
    GreenMatrix,
    LiouvillianMatrix,
    apply_green,
    guarded_block,
    matrix_log,
)
from .homodyne import (
    HomodyneConfig,
    QuadratureBatch,
    compensate_blocks,
    pattern_means,
    sample_quadratures,
    summarize_blocks,
)
from .parallel import STREAM_HOMODYNE, ordered_map, substream
from .twinbeam import (
    OUTCOME_FLOOR,
    SERIES_HARD_CAP,
    SERIES_TAIL_EPS,
    SERIES_TAIL_TOL,
    GreenEstimate,
    OutcomeEntry,
    OutcomeTable,
    TwinBeamConfig,
    conditional_state,
    invert_green_matrix,
    outcome_distribution,
    retained_outcomes,
)

logger = logging.getLogger(__name__)

Z_THRESHOLD = 3.0
MIN_SNR = 5.0


# ========================
# CONFIGURATION
# ========================

@dataclass(frozen=True)
class Device:
    """Theoretical device: its green matrix and, when known, its Liouvillian."""

    kind: str
    green: GreenMatrix
    liouvillian: Optional[LiouvillianMatrix] = None
    green_sigma: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.green.dim

    @property
    def tau(self) -> float:
        return self.green.tau


@dataclass(frozen=True)
class ReconstructionParams:
    n_max: Optional[int] = None
    tail_epsilon: float = SERIES_TAIL_EPS
    hard_cap: int = SERIES_HARD_CAP
    tail_tolerance: float = SERIES_TAIL_TOL
    min_snr: float = MIN_SNR
    guard: int = DEFAULT_GUARD
    method: ExtractionMethod = ExtractionMethod.MATRIX_LOG
    allow_fallback: bool = True
    outcome_floor: float = OUTCOME_FLOOR
    allocation: str = "equal"


@dataclass(frozen=True)
class ExperimentConfig:
    device: Device
    twin_beam: TwinBeamConfig
    homodyne: HomodyneConfig
    reconstruction: ReconstructionParams = field(default_factory=ReconstructionParams)
    seed: int = 0
    workers: int = 1
    keep_samples: bool = False

    def __post_init__(self):
        k_max = self.homodyne.k_max
        guard = self.reconstruction.guard
        needed = k_max + self.twin_beam.n_outcome_max + guard
        if needed > self.device.dim:
            raise ConfigError(
                f"k_max + n_outcome_max + guard = {needed} exceeds the device dimension {self.device.dim}"
            )
        if k_max + 1 - guard < 1:
            raise ConfigError(f"guard {guard} leaves no reported block for k_max={k_max}")
        if self.reconstruction.allocation not in ("equal", "weighted"):
            raise ConfigError(f"unknown allocation '{self.reconstruction.allocation}'")

    @property
    def size(self) -> int:
        """Side of the estimated green-matrix block."""
        return self.homodyne.k_max + 1


def build_device(spec, workers: int = 1) -> Device:
    """Device model from a validated ``device`` config block."""
    if spec.kind == "pia":
        params = PiaParams(spec.a_gain, spec.b_loss, spec.tau)
        return Device("pia", pia_green(params, spec.dim), build_pia(params, spec.dim))
    if spec.kind == "laser":
        params = LaserParams(
            spec.c_coop, spec.n_sat, spec.sigma0, spec.f_ratio, spec.gamma_cav, spec.t_star,
            spec.coupling_scale,
        )
        atom_init = AtomInit(spec.atom_init)
        if spec.solver == "qjump":
            green, sigma = laser_green_qjump(
                params, spec.dim, atom_init, spec.n_traj, spec.qjump_seed, workers, spec.guard,
            )
        else:
            green, sigma = laser_green_ode(params, spec.dim, atom_init, guard=spec.guard), None
        green.warn_leakage(max(spec.guard, DEFAULT_GUARD))
        theory = None
        if green.tau > 0:
            # inputs in the guard band are not computed
            columns = spec.dim - spec.guard
            computed = GreenMatrix(green.g[:columns, :columns], green.tau, validate=False)
            theory = effective_liouvillian(computed, ExtractionMethod.MATRIX_LOG)
        return Device("laser", green, theory, sigma)
    green = serialization.read_green_csv(spec.path, spec.tau)
    if green.dim != spec.dim:
        raise ConfigError(f"{spec.path} holds a {green.dim}x{green.dim} green matrix, config says dim={spec.dim}")
    green.warn_leakage()
    try:
        theory = matrix_log(green)
    except BranchFailureError as exc:
        logger.warning("supplied green matrix has no principal logarithm: %s", exc)
        theory = None
    return Device("green_csv", green, theory)


# ========================
# DATA GENERATION
# ========================

@dataclass(frozen=True)
class RawDataset:
    """Estimated outcome table, with the per-block estimates on each entry, and optional samples."""

    table: OutcomeTable
    batches: Tuple[QuadratureBatch, ...] = ()


def _block_sizes(total: int, blocks: int) -> List[int]:
    base, extra = divmod(total, blocks)
    return [base + (1 if b < extra else 0) for b in range(blocks)]


def _allocate(cfg: ExperimentConfig, outcomes: List[int]) -> Dict[int, int]:
    per_state = cfg.homodyne.samples_per_state
    if cfg.reconstruction.allocation == "equal" or per_state == 0:
        return {n: per_state for n in outcomes}
    probs = np.array([outcome_distribution(cfg.twin_beam, n) for n in outcomes])
    total = per_state * len(outcomes)
    floor = 2 * cfg.homodyne.blocks
    shares = np.maximum(np.rint(total * probs / probs.sum()).astype(int), floor)
    return dict(zip(outcomes, shares.tolist()))


def _simulate_block(task) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    probs, eta_h, n, block, count, seed, n_estimated, keep = task
    rng = substream(seed, STREAM_HOMODYNE, n, block)
    samples = sample_quadratures(DephasedState(probs), eta_h, rng, count)
    return pattern_means(samples, n_estimated - 1), (samples if keep else None)


def run_experiment(cfg: ExperimentConfig) -> RawDataset:
    device = cfg.device
    outcomes = retained_outcomes(cfg.twin_beam, cfg.reconstruction.outcome_floor)
    dropped = [n for n in outcomes if n >= device.dim]
    if dropped:
        logger.warning("outcomes %s lie beyond the device dimension and are skipped", dropped)
        outcomes = [n for n in outcomes if n < device.dim]
    allocation = _allocate(cfg, outcomes)

    tasks = []
    for n in outcomes:
        conditioned = conditional_state(cfg.twin_beam, n, device.dim)
        conditioned.check_normalized()
        state = apply_green(device.green, conditioned)
        for block, count in enumerate(_block_sizes(allocation[n], cfg.homodyne.blocks)):
            if count:
                tasks.append((
                    state.probs, cfg.homodyne.eta_h, n, block, count, cfg.seed,
                    cfg.homodyne.n_estimated, cfg.keep_samples,
                ))
    logger.info(
        "simulating %d outcomes in %d (outcome, block) tasks on %d workers",
        len(outcomes), len(tasks), cfg.workers,
    )
    results = ordered_map(_simulate_block, tasks, cfg.workers)

    block_means: Dict[int, List[np.ndarray]] = {}
    counts: Dict[int, int] = {}
    batches: List[QuadratureBatch] = []
    for task, (means, samples) in zip(tasks, results):
        n, block, count = task[2], task[3], task[4]
        block_means.setdefault(n, []).append(means)
        counts[n] = counts.get(n, 0) + count
        if samples is not None:
            batches.append(QuadratureBatch(samples, block, n))

    entries = {}
    for n, means in block_means.items():
        if len(means) < 2:
            logger.warning("outcome %d has fewer than 2 non-empty blocks; skipped", n)
            continue
        compensated = compensate_blocks(means, cfg.homodyne)
        entries[n] = OutcomeEntry(summarize_blocks(compensated), counts[n], blocks=compensated)
    return RawDataset(table=OutcomeTable(entries), batches=tuple(batches))


# ========================
# RECONSTRUCTION
# ========================

@dataclass(frozen=True)
class ComparisonSummary:
    z: np.ndarray
    rmse: float
    max_abs_z: float
    fraction_within: float
    flagged: List[Tuple[int, int]]
    chi2_stat: Optional[float] = None
    chi2_dof: int = 0
    chi2_pvalue: Optional[float] = None
    # the estimate carries a systematic error its sigma does not describe
    biased: bool = False


@dataclass(frozen=True)
class ReconstructionReport:
    table: OutcomeTable
    g_hat: np.ndarray
    g_sigma: np.ndarray
    n_used: np.ndarray
    tail_bound: np.ndarray
    l_hat: np.ndarray
    l_sigma: np.ndarray
    tau: float
    guard: int
    method_requested: ExtractionMethod
    method_used: ExtractionMethod
    converged_columns: int = 0
    finite_difference_bias: Optional[float] = None
    l_theory: Optional[np.ndarray] = None
    comparison: Optional[ComparisonSummary] = None
    elapsed: float = field(default=0.0, compare=False)

    @property
    def size(self) -> int:
        """Side of the estimated green-matrix block."""
        return self.g_hat.shape[0]

    @property
    def log_size(self) -> int:
        """Side of the block the Liouvillian was extracted from."""
        return self.l_hat.shape[0]

    @property
    def block(self) -> int:
        return self.log_size - self.guard

    def diagonals(self) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        """Main, first upper and first lower diagonals of the reported block of L."""
        l = guarded_block(self.l_hat, self.guard)
        s = guarded_block(self.l_sigma, self.guard)
        return {offset: (np.diagonal(l, offset).copy(), np.diagonal(s, offset).copy())
                for offset in (-1, 0, 1)}


def log_sigma(l_hat: np.ndarray, modes: np.ndarray, tau: float) -> np.ndarray:
    """First-order sigma of log(G)/tau.

    ``modes`` has shape (V, size, size) and describes the error of G as a sum of V
    independent unit-variance directions, so correlations between entries of G
    propagate through the derivative of the matrix exponential.
    """
    size = l_hat.shape[0]
    modes = np.asarray(modes, dtype=float)
    if modes.shape[1:] != (size, size):
        raise InvalidInputError(f"error modes of shape {modes.shape} do not match a {size}x{size} block")
    if not len(modes):
        return np.zeros((size, size))
    a = l_hat * tau
    jacobian = np.empty((size * size, size * size))
    unit = np.zeros((size, size))
    for column in range(size * size):
        unit.flat[column] = 1.0
        jacobian[:, column] = expm_frechet(a, unit, compute_expm=False).ravel()
        unit.flat[column] = 0.0
    try:
        response = np.linalg.solve(jacobian, modes.reshape(len(modes), -1).T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("derivative of the matrix exponential is singular") from exc
    return np.sqrt((response ** 2).sum(axis=1)).reshape(size, size) / tau


def log_block_size(table: OutcomeTable, estimate: GreenEstimate, params: ReconstructionParams) -> int:
    """Side of the leading block of the estimated G that is handed to the logarithm.

    Columns whose inversion series was cut short by the available outcomes are left
    out, and so are trailing columns whose diagonal entry is not resolved above
    ``min_snr`` standard errors.
    """
    converged = estimate.converged_columns(params.tail_tolerance)
    if converged - params.guard < 1:
        wanted = converged + int(estimate.n_wanted[converged])
        raise IncompleteDataError(
            f"only {converged} leading green-matrix columns have a series tail below "
            f"{params.tail_tolerance:.1e}; raise n_outcome_max",
            range(table.max_outcome + 1, wanted + 1),
        )
    if converged < estimate.size:
        logger.warning(
            "columns %d..%d of the estimated green matrix are not converged "
            "(neglected term bound %.3e); they are left out of the logarithm",
            converged, estimate.size - 1, float(estimate.tail_bound[0, converged]),
        )

    diagonal = np.diagonal(estimate.g)
    noise = np.diagonal(estimate.sigma)
    resolved = 0
    while resolved < estimate.size and diagonal[resolved] >= params.min_snr * noise[resolved]:
        resolved += 1
    if resolved < params.guard + 1:
        logger.warning(
            "only %d leading diagonal entries of G stand %.1f sigma above noise; "
            "the reported block is noise-dominated", resolved, params.min_snr,
        )
    size = min(converged, max(resolved, params.guard + 1))
    logger.info("logarithm taken on the leading %dx%d block of G", size, size)
    return size


def extract_liouvillian(
    estimate: GreenEstimate,
    tau: float,
    size: int,
    method: ExtractionMethod,
    allow_fallback: bool,
    smallest: int = 1,
) -> Tuple[LiouvillianMatrix, np.ndarray, ExtractionMethod]:
    """Effective Liouvillian of a leading block of the estimate with its sigma.

    The matrix logarithm is tried on blocks from ``size`` down to ``smallest``; a
    noisy trailing entry can push an eigenvalue onto the branch cut of a larger block.
    """
    method = ExtractionMethod(method)
    if method is ExtractionMethod.MATRIX_LOG:
        for block in range(size, smallest - 1, -1):
            green = GreenMatrix(estimate.g[:block, :block], tau, validate=False)
            try:
                l_hat = effective_liouvillian(green, method)
            except BranchFailureError as exc:
                logger.warning("matrix logarithm of the leading %dx%d block failed: %s", block, block, exc)
                continue
            return l_hat, log_sigma(l_hat.l, estimate.modes[:, :block, :block], tau), method
        if not allow_fallback:
            raise BranchFailureError(
                f"no leading block of side {smallest}..{size} has a principal logarithm"
            )
        logger.warning("matrix logarithm failed on every block; using finite differences")
    green = GreenMatrix(estimate.g[:size, :size], tau, validate=False)
    l_hat = effective_liouvillian(green, ExtractionMethod.FINITE_DIFFERENCE)
    return l_hat, estimate.sigma[:size, :size] / tau, ExtractionMethod.FINITE_DIFFERENCE


def finite_difference_bias(l_hat: np.ndarray, tau: float) -> float:
    """Leading systematic error of (G - 1) / tau as an estimate of L, about tau L^2 / 2."""
    return 0.5 * tau * float(np.linalg.norm(l_hat, 1)) ** 2


def compare(
    l_hat: np.ndarray,
    sigma: np.ndarray,
    l_theory: np.ndarray,
    tridiagonal: bool = False,
    biased: bool = False,
) -> ComparisonSummary:
    l_hat, sigma, l_theory = (np.asarray(a, dtype=float) for a in (l_hat, sigma, l_theory))
    if not l_hat.shape == sigma.shape == l_theory.shape:
        raise InvalidInputError(f"shape mismatch {l_hat.shape}, {sigma.shape}, {l_theory.shape}")
    residual = l_hat - l_theory
    positive = sigma > 0
    z = np.zeros_like(residual)
    z[positive] = residual[positive] / sigma[positive]
    bad = (np.abs(z) > Z_THRESHOLD) | (~positive & (residual != 0))
    flagged = [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]

    summary = dict(
        z=z,
        rmse=float(np.sqrt(np.mean(residual ** 2))),
        max_abs_z=float(np.abs(z).max()) if z.size else 0.0,
        fraction_within=float(np.mean(~bad)) if z.size else 1.0,
        flagged=flagged,
        biased=biased,
    )
    if tridiagonal:
        rows, cols = np.indices(residual.shape)
        off = (np.abs(rows - cols) > 1) & positive
        dof = int(off.sum())
        if dof:
            stat = float(np.sum(z[off] ** 2))
            summary.update(chi2_stat=stat, chi2_dof=dof, chi2_pvalue=float(chi2.sf(stat, dof)))
    if biased:
        logger.warning(
            "comparison scores a finite-difference estimate; its z values include the "
            "O(tau L^2) bias and are not calibrated"
        )
    return ComparisonSummary(**summary)


def reconstruct_green(
    table: OutcomeTable,
    twin_beam: TwinBeamConfig,
    params: ReconstructionParams,
    size: int,
    tau: float,
    theory: Optional[LiouvillianMatrix] = None,
    tridiagonal: bool = False,
) -> ReconstructionReport:
    """Invert an outcome table to G, take the effective Liouvillian and compare it."""
    start = time.perf_counter()
    estimate = invert_green_matrix(
        table, twin_beam, size, params.n_max, params.tail_epsilon, params.hard_cap,
    )
    log_size = log_block_size(table, estimate, params)
    l_hat, l_sigma, used = extract_liouvillian(
        estimate, tau, log_size, params.method, params.allow_fallback, smallest=params.guard + 1,
    )

    bias = None
    if used is ExtractionMethod.FINITE_DIFFERENCE:
        bias = finite_difference_bias(l_hat.l, tau)
        logger.warning(
            "finite-difference extraction at tau=%g carries a systematic error up to %.3g "
            "that l_sigma does not include", tau, bias,
        )

    l_theory = comparison = None
    if theory is not None:
        block = l_hat.dim - params.guard
        if theory.dim < block:
            raise ConfigError(f"theory Liouvillian of dim {theory.dim} is smaller than the block {block}")
        l_theory = theory.l[:block, :block].copy()
        comparison = compare(
            guarded_block(l_hat.l, params.guard),
            guarded_block(l_sigma, params.guard),
            l_theory,
            tridiagonal=tridiagonal,
            biased=bias is not None,
        )
        logger.info(
            "reconstruction: rmse=%.4g max|z|=%.3g within %.0f sigma: %.1f%%",
            comparison.rmse, comparison.max_abs_z, Z_THRESHOLD, 100 * comparison.fraction_within,
        )
    elapsed = time.perf_counter() - start
    logger.info("reconstruction finished in %.2f s (method %s)", elapsed, used.value)
    return ReconstructionReport(
        table=table,
        g_hat=estimate.g,
        g_sigma=estimate.sigma,
        n_used=estimate.n_used,
        tail_bound=estimate.tail_bound,
        l_hat=l_hat.l,
        l_sigma=l_sigma,
        tau=tau,
        guard=params.guard,
        method_requested=ExtractionMethod(params.method),
        method_used=used,
        converged_columns=estimate.converged_columns(params.tail_tolerance),
        finite_difference_bias=bias,
        l_theory=l_theory,
        comparison=comparison,
        elapsed=elapsed,
    )


def reconstruct(raw: RawDataset, cfg: ExperimentConfig) -> ReconstructionReport:
    return reconstruct_green(
        raw.table,
        cfg.twin_beam,
        cfg.reconstruction,
        cfg.size,
        cfg.device.tau,
        cfg.device.liouvillian,
        tridiagonal=cfg.device.kind == "pia",
    )


def theory_table(cfg: ExperimentConfig) -> OutcomeTable:
    """Noiseless outcome table on the estimated range, as the estimator would see it."""
    outcomes = [n for n in retained_outcomes(cfg.twin_beam, cfg.reconstruction.outcome_floor)
                if n < cfg.device.dim]
    entries = {}
    for n in outcomes:
        state = apply_green(cfg.device.green, conditional_state(cfg.twin_beam, n, cfg.device.dim))
        values = state.probs[: cfg.size]
        entries[n] = OutcomeEntry(EstimatedDistribution(values, np.zeros_like(values)))
    return OutcomeTable(entries)


def experiment_config(cfg, device: Device, keep_samples: bool = False) -> ExperimentConfig:
    """Domain config from a validated config file with twin_beam and homodyne blocks."""
    tb, hd, rc = cfg.twin_beam, cfg.homodyne, cfg.reconstruction
    return ExperimentConfig(
        device=device,
        twin_beam=TwinBeamConfig(tb.kappa2, tb.eta_d, tb.n_outcome_max),
        homodyne=HomodyneConfig(hd.eta_h, hd.k_max, hd.samples_per_state, hd.blocks, hd.bernoulli_margin),
        reconstruction=ReconstructionParams(
            n_max=rc.n_max,
            tail_epsilon=rc.tail_epsilon,
            hard_cap=rc.hard_cap,
            tail_tolerance=rc.tail_tolerance,
            min_snr=rc.min_snr,
            guard=rc.guard,
            method=rc.method,
            allow_fallback=rc.allow_fallback,
            outcome_floor=rc.outcome_floor,
            allocation=rc.allocation,
        ),
        seed=cfg.seed,
        workers=cfg.workers,
        keep_samples=keep_samples,
    )
