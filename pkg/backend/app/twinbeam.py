"""Twin-beam conditioning and the forward/inverse maps between outcome tables and G.

Photodetection of one twin beam with efficiency ``eta_d`` and outcome ``n`` leaves the
other beam in a shifted negative-binomial mixture. With ``z = kappa2 (1 - eta_d)`` and
``D = 1 - z``:

    <m+n| rho_n |m+n> = D^(n+1) C(m+n, n) z^m

The inverse map expands G column by column in the alternating ratio ``-z / D``.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from scipy.special import comb
from scipy.stats import nbinom

from .errors import IncompleteDataError, InternalError, InvalidInputError
from .fock_core import TAIL_TOL, DephasedState, EstimatedDistribution, GreenMatrix, fock_state

logger = logging.getLogger(__name__)

OUTCOME_FLOOR = 1e-4
SERIES_TAIL_EPS = 1e-9
SERIES_HARD_CAP = 200
# columns whose neglected-term bound exceeds this are not used for the logarithm
SERIES_TAIL_TOL = 1e-4


@dataclass(frozen=True)
class TwinBeamConfig:
    kappa2: float
    eta_d: float
    n_outcome_max: int = 12

    def __post_init__(self):
        if not 0.0 <= self.kappa2 < 1.0:
            raise InvalidInputError(f"kappa2 must lie in [0, 1), got {self.kappa2}")
        if not 0.0 < self.eta_d <= 1.0:
            raise InvalidInputError(f"eta_d must lie in (0, 1], got {self.eta_d}")
        if self.n_outcome_max < 0:
            raise InvalidInputError("n_outcome_max must be >= 0")

    @property
    def z(self) -> float:
        """Geometric ratio of the conditional state above the heralded number."""
        return self.kappa2 * (1.0 - self.eta_d)

    @property
    def norm(self) -> float:
        return 1.0 - self.z


@dataclass(frozen=True)
class OutcomeEntry:
    """Estimated r_k(n) for one outcome, optionally with the per-block estimates behind it."""

    estimate: EstimatedDistribution
    counts: int = 0
    blocks: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.counts < 0:
            raise InvalidInputError("sample counts must be >= 0")
        if self.blocks is not None:
            blocks = np.array(self.blocks, dtype=float)
            if blocks.ndim != 2 or blocks.shape[0] < 2 or blocks.shape[1] != self.estimate.dim:
                raise InvalidInputError(
                    f"per-block estimates need shape (>= 2, {self.estimate.dim}), got {blocks.shape}"
                )
            if not np.all(np.isfinite(blocks)):
                raise InvalidInputError("per-block estimates contain non-finite entries")
            blocks.setflags(write=False)
            object.__setattr__(self, "blocks", blocks)

    @property
    def r(self) -> np.ndarray:
        return self.estimate.values

    @property
    def sigma(self) -> np.ndarray:
        if self.estimate.sigma is None:
            return np.zeros_like(self.estimate.values)
        return self.estimate.sigma

    def error_modes(self) -> np.ndarray:
        """Rows whose outer products sum to the covariance of ``r``.

        With per-block estimates this is the sample covariance of the block mean, so
        correlations between photon numbers measured on the same samples are kept.
        Otherwise the entries are taken as independent with the reported sigma.
        """
        if self.blocks is not None:
            count = self.blocks.shape[0]
            return (self.blocks - self.blocks.mean(axis=0)) / math.sqrt(count * (count - 1))
        sigma = self.sigma
        return np.diag(sigma)[sigma > 0]


@dataclass(frozen=True)
class OutcomeTable:
    """Estimated output distributions r_k(n) keyed by the conditioning outcome n."""

    entries: Mapping[int, OutcomeEntry] = field(default_factory=dict)

    def __post_init__(self):
        entries = {int(n): entry for n, entry in sorted(self.entries.items())}
        if any(n < 0 for n in entries):
            raise InvalidInputError("conditioning outcomes must be >= 0")
        lengths = {entry.estimate.dim for entry in entries.values()}
        if len(lengths) > 1:
            raise InvalidInputError(f"outcome distributions have mixed lengths {sorted(lengths)}")
        object.__setattr__(self, "entries", entries)

    def __contains__(self, n: int) -> bool:
        return n in self.entries

    def __getitem__(self, n: int) -> OutcomeEntry:
        return self.entries[n]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def outcomes(self) -> List[int]:
        return list(self.entries)

    @property
    def dim(self) -> int:
        if not self.entries:
            return 0
        return next(iter(self.entries.values())).estimate.dim

    @property
    def max_outcome(self) -> int:
        return max(self.entries) if self.entries else -1


# ========================
# OUTCOME STATISTICS
# ========================

def outcome_distribution(cfg: TwinBeamConfig, n: int) -> float:
    if n < 0:
        raise InvalidInputError("outcome n must be >= 0")
    ratio = cfg.eta_d * cfg.kappa2 / cfg.norm
    return float((1.0 - cfg.kappa2) * ratio ** n / cfg.norm)


def outcome_probabilities(cfg: TwinBeamConfig, n_max: int) -> np.ndarray:
    ratio = cfg.eta_d * cfg.kappa2 / cfg.norm
    return (1.0 - cfg.kappa2) * ratio ** np.arange(n_max + 1) / cfg.norm


def retained_outcomes(cfg: TwinBeamConfig, floor: float = OUTCOME_FLOOR) -> List[int]:
    """Outcomes with p_n >= floor together with every n <= n_outcome_max."""
    # p_n is geometric and decreasing, so the retained set is a prefix
    n = 0
    while outcome_distribution(cfg, n + 1) >= floor:
        n += 1
    if outcome_distribution(cfg, 0) < floor:
        n = -1
    return list(range(max(n, cfg.n_outcome_max) + 1))


# ========================
# FORWARD MAP
# ========================

def conditional_state(cfg: TwinBeamConfig, n: int, dim: int) -> DephasedState:
    if not 0 <= n < dim:
        raise InvalidInputError(f"outcome {n} outside truncation dim {dim}")
    if cfg.z == 0.0:
        return fock_state(n, dim)
    probs = np.zeros(dim)
    probs[n:] = nbinom.pmf(np.arange(dim - n), n + 1, cfg.norm)
    state = DephasedState(probs)
    if state.leakage > TAIL_TOL:
        logger.warning(
            "conditional state for outcome %d loses %.3e of probability at dim=%d",
            n, state.leakage, dim,
        )
    return state


def predict_outputs(
    g: GreenMatrix, cfg: TwinBeamConfig, n: int, guard: int = 0, tail_epsilon: float = 1e-12
) -> EstimatedDistribution:
    limit = g.dim - guard
    if not 0 <= n < limit:
        raise InvalidInputError(f"outcome {n} outside the guarded block of size {limit}")
    if cfg.z == 0.0:
        return EstimatedDistribution(g.g[:, n].copy())
    weights = nbinom.pmf(np.arange(limit - n), n + 1, cfg.norm)
    neglected = float(nbinom.sf(limit - n - 1, n + 1, cfg.norm))
    if neglected > tail_epsilon:
        logger.warning(
            "forward map for outcome %d truncated with %.3e of input weight beyond index %d",
            n, neglected, limit - 1,
        )
    return EstimatedDistribution(g.g[:, n:limit] @ weights)


def forward_table(
    g: GreenMatrix, cfg: TwinBeamConfig, outcomes: Iterable[int], counts: int = 0
) -> OutcomeTable:
    """Noiseless outcome table of a truncated device.

    Outcomes at or beyond the truncation feed only states the device never reaches, so
    their distributions are exact zeros.
    """
    entries: Dict[int, OutcomeEntry] = {}
    for n in outcomes:
        if n < g.dim:
            estimate = predict_outputs(g, cfg, n)
        else:
            estimate = EstimatedDistribution(np.zeros(g.dim))
        entries[n] = OutcomeEntry(EstimatedDistribution(estimate.values, np.zeros(g.dim)), counts)
    return OutcomeTable(entries)


# ========================
# INVERSE MAP
# ========================

def series_ratio(cfg: TwinBeamConfig) -> float:
    ratio = -cfg.z / cfg.norm
    if abs(ratio) >= 1.0:
        raise InternalError(f"inversion series ratio {ratio} does not converge")
    return ratio


def _coefficients(cfg: TwinBeamConfig, l: int, n_max: int) -> np.ndarray:
    n = np.arange(n_max + 1)
    return cfg.norm ** (-(l + 1)) * comb(n + l, l) * series_ratio(cfg) ** n


def adaptive_n_max(
    cfg: TwinBeamConfig,
    l: int,
    r_bound: float = 1.0,
    tail_epsilon: float = SERIES_TAIL_EPS,
    hard_cap: int = SERIES_HARD_CAP,
) -> int:
    """Smallest n whose series term bound |c_n| * r_bound drops below ``tail_epsilon``."""
    ratio = abs(series_ratio(cfg))
    if ratio == 0.0 or r_bound == 0.0:
        return 0
    magnitude = cfg.norm ** (-(l + 1)) * r_bound
    for n in range(hard_cap + 1):
        if magnitude < tail_epsilon:
            return n
        # C(n+1+l, l) / C(n+l, l) = (n+1+l) / (n+1)
        magnitude *= ratio * (n + 1 + l) / (n + 1)
    logger.warning(
        "inversion series for column %d hit the hard cap %d (next term bound %.3e)",
        l, hard_cap, magnitude,
    )
    return hard_cap


def _required_outcomes(table: OutcomeTable, l: int, n_max: int, strict: bool) -> int:
    wanted = range(l, l + n_max + 1)
    if strict:
        missing = [n for n in wanted if n not in table]
    else:
        missing = [n for n in wanted if n not in table and n <= table.max_outcome]
    if missing or l not in table:
        raise IncompleteDataError(
            f"column {l} needs outcomes {l}..{l + n_max}", missing or [l]
        )
    return min(n_max, table.max_outcome - l)


def invert_green(
    table: OutcomeTable, cfg: TwinBeamConfig, l: int, k: int, n_max: int
) -> Tuple[float, float]:
    if l < 0 or n_max < 0:
        raise InvalidInputError("column l and n_max must be >= 0")
    if not 0 <= k < table.dim:
        raise InvalidInputError(f"row {k} outside the estimated range 0..{table.dim - 1}")
    _required_outcomes(table, l, n_max, strict=True)
    coefficients = _coefficients(cfg, l, n_max)
    r = np.array([table[l + n].r[k] for n in range(n_max + 1)])
    sigma = np.array([table[l + n].sigma[k] for n in range(n_max + 1)])
    terms = coefficients * r
    ordered = terms[np.argsort(-np.abs(terms), kind="stable")]
    value = math.fsum(ordered)
    return value, float(np.sqrt(math.fsum((coefficients * sigma) ** 2)))


@dataclass(frozen=True)
class GreenEstimate:
    """Estimated green matrix block with per-entry sigma and series diagnostics.

    ``modes`` has shape (V, size, size); summing the outer products of its rows gives
    the covariance of the flattened estimate, and the root sum of squares over the
    first axis reproduces ``sigma``. ``n_wanted`` is the series length each column
    asked for before the table shortened it.
    """

    g: np.ndarray
    sigma: np.ndarray
    n_used: np.ndarray
    tail_bound: np.ndarray
    modes: np.ndarray
    n_wanted: np.ndarray

    @property
    def size(self) -> int:
        return self.g.shape[0]

    def converged_columns(self, tolerance: float = SERIES_TAIL_TOL) -> int:
        """Number of leading columns whose neglected-term bound stays within ``tolerance``."""
        for l in range(self.size):
            if self.tail_bound[0, l] > tolerance:
                return l
        return self.size


def _green_modes(
    table: OutcomeTable, cfg: TwinBeamConfig, size: int, n_used: np.ndarray
) -> np.ndarray:
    # outcomes are measured on disjoint samples, so their modes stack independently
    blocks = []
    for n, entry in table.entries.items():
        modes = entry.error_modes()[:, :size]
        if not len(modes):
            continue
        block = np.zeros((modes.shape[0], size, size))
        for l in range(min(n + 1, size)):
            used = int(n_used[0, l])
            if n - l > used:
                continue
            coefficient = _coefficients(cfg, l, n - l)[n - l]
            block[:, :, l] = coefficient * modes
        blocks.append(block)
    if not blocks:
        return np.zeros((0, size, size))
    stacked = np.concatenate(blocks)
    return stacked[np.any(stacked != 0.0, axis=(1, 2))]


def invert_green_matrix(
    table: OutcomeTable,
    cfg: TwinBeamConfig,
    size: int,
    n_max: Optional[int] = None,
    tail_epsilon: float = SERIES_TAIL_EPS,
    hard_cap: int = SERIES_HARD_CAP,
) -> GreenEstimate:
    """Invert every (k, l) pair of the leading ``size`` x ``size`` block.

    With ``n_max`` given, every column needs outcomes l..l+n_max. Otherwise each column
    takes its adaptive bound, shortened to the outcomes the table holds; the neglected
    term bound is recorded as the truncation diagnostic.
    """
    if size < 1 or size > table.dim:
        raise InvalidInputError(f"block size {size} outside 1..{table.dim}")
    if not len(table):
        raise IncompleteDataError("outcome table is empty", range(size))
    missing = [l for l in range(size) if l not in table]
    if missing:
        raise IncompleteDataError("outcome table does not cover every column", missing)

    r_bound = max(
        float(np.max(np.abs(entry.r) + entry.sigma)) for entry in table.entries.values()
    )
    ratio = abs(series_ratio(cfg))
    g = np.zeros((size, size))
    sigma = np.zeros((size, size))
    n_used = np.zeros((size, size), dtype=int)
    n_wanted = np.zeros(size, dtype=int)
    tail = np.zeros((size, size))
    shortened = []
    for l in range(size):
        if n_max is not None:
            used = wanted = n_max
            _required_outcomes(table, l, n_max, strict=True)
        else:
            wanted = adaptive_n_max(cfg, l, r_bound, tail_epsilon, hard_cap)
            used = _required_outcomes(table, l, wanted, strict=False)
            if used < wanted:
                shortened.append(l)
        n_wanted[l] = wanted
        next_term = (
            cfg.norm ** (-(l + 1)) * comb(used + 1 + l, l) * ratio ** (used + 1) * r_bound
        )
        for k in range(size):
            g[k, l], sigma[k, l] = invert_green(table, cfg, l, k, used)
        n_used[:, l] = used
        tail[:, l] = next_term
    if shortened:
        worst = float(tail[0, shortened].max())
        log = logger.warning if worst > tail_epsilon else logger.debug
        log(
            "inversion series shortened by the available outcomes for columns %s "
            "(largest neglected term bound %.3e)", shortened, worst,
        )
    modes = _green_modes(table, cfg, size, n_used)
    return GreenEstimate(g, sigma, n_used, tail, modes, n_wanted)
