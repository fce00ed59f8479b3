"""File formats: matrix CSVs, outcome-table JSON, raw quadrature CSV and report JSON.

Every file starts with (CSV) or carries (JSON) the hash of the config that produced it.
"""
import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np

from .errors import IncompleteDataError, InvalidInputError
from .fock_core import EstimatedDistribution, GreenMatrix
from .schemas import OutcomeRecord
from .twinbeam import OutcomeEntry, OutcomeTable

logger = logging.getLogger(__name__)

HASH_EXCLUDED = ("workers", "output_dir")
OUTCOME_PATTERN = "outcome_*.json"
QUADRATURE_CONVENTION = "x = (a + a^+)/sqrt(2), vacuum variance 1/2"


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    """sha256 of the canonical config, ignoring settings that do not change results."""
    relevant = {key: value for key, value in config.items() if key not in HASH_EXCLUDED}
    return hashlib.sha256(canonical_json(relevant).encode()).hexdigest()


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


# ========================
# MATRIX CSV
# ========================

def write_matrix_csv(
    path: Path, matrix: np.ndarray, sigma: Optional[np.ndarray] = None, digest: str = ""
) -> None:
    matrix = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="") as handle:
        handle.write(f"# config_hash={digest}\n")
        writer = csv.writer(handle)
        writer.writerow(["row", "col", "value", "sigma"])
        for (row, col), value in np.ndenumerate(matrix):
            error = "" if sigma is None else _fmt(sigma[row, col])
            writer.writerow([row, col, _fmt(value), error])


def read_matrix_csv(path: Path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"matrix file {path} does not exist")
    with open(path, newline="") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    reader = csv.DictReader(lines)
    records = list(reader)
    if not records or reader.fieldnames[:3] != ["row", "col", "value"]:
        raise InvalidInputError(f"{path} is not a row,col,value,sigma matrix file")
    rows = [int(record["row"]) for record in records]
    cols = [int(record["col"]) for record in records]
    size = max(max(rows), max(cols)) + 1
    matrix = np.zeros((size, size))
    sigma = np.zeros((size, size))
    has_sigma = True
    for row, col, record in zip(rows, cols, records):
        matrix[row, col] = float(record["value"])
        if record.get("sigma"):
            sigma[row, col] = float(record["sigma"])
        else:
            has_sigma = False
    if len(records) != size * size:
        raise InvalidInputError(f"{path} lists {len(records)} entries for a {size}x{size} matrix")
    return matrix, (sigma if has_sigma else None)


def read_green_csv(path: Path, tau: float) -> GreenMatrix:
    matrix, _ = read_matrix_csv(path)
    return GreenMatrix(matrix, tau)


# ========================
# OUTCOME TABLES
# ========================

def outcome_record(
    n: int, estimate: EstimatedDistribution, counts: int, digest: str, blocks: Optional[np.ndarray] = None
) -> dict:
    sigma = estimate.sigma if estimate.sigma is not None else np.zeros(estimate.dim)
    record = {
        "config_hash": digest,
        "counts": int(counts),
        "n": int(n),
        "r": [float(v) for v in estimate.values],
        "sigma": [float(v) for v in sigma],
    }
    if blocks is not None:
        record["blocks"] = [[float(v) for v in block] for block in blocks]
    return record


def write_outcome_table(directory: Path, table: OutcomeTable, digest: str) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for n in table.outcomes:
        entry = table[n]
        path = directory / f"outcome_{n:03d}.json"
        write_json(path, outcome_record(n, entry.estimate, entry.counts, digest, entry.blocks))
        written.append(path)
    return written


def read_outcome_table(directory: Path) -> Tuple[OutcomeTable, str]:
    directory = Path(directory)
    paths = sorted(directory.glob(OUTCOME_PATTERN))
    if not paths:
        raise IncompleteDataError(f"no outcome files in {directory}")
    entries = {}
    digests = set()
    for path in paths:
        record = OutcomeRecord.model_validate_json(path.read_text())
        estimate = EstimatedDistribution(record.r, record.sigma)
        blocks = None if record.blocks is None else np.array(record.blocks)
        entries[record.n] = OutcomeEntry(estimate, record.counts, blocks)
        digests.add(record.config_hash)
    if len(digests) > 1:
        logger.warning("outcome files in %s come from %d different configs", directory, len(digests))
    return OutcomeTable(entries), (digests.pop() if len(digests) == 1 else "")


def write_quadratures_csv(path: Path, batches: Iterable, digest: str) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(f"# config_hash={digest}\n")
        writer = csv.writer(handle)
        writer.writerow(["outcome_n", "block", "x"])
        for batch in batches:
            for x in batch.samples:
                writer.writerow([batch.outcome_n, batch.block_id, _fmt(x)])


# ========================
# REPORTS
# ========================

def _matrix(values: Optional[np.ndarray]):
    if values is None:
        return None
    return np.asarray(values, dtype=float).tolist()


def report_to_dict(report, config: dict, digest: str, device_kind: str) -> dict:
    """JSON-ready report; wall-clock time is left out so identical runs give identical files."""
    table = report.table
    comparison = None
    if report.comparison is not None:
        c = report.comparison
        comparison = {
            "biased": c.biased,
            "chi2_dof": c.chi2_dof,
            "chi2_pvalue": c.chi2_pvalue,
            "chi2_stat": c.chi2_stat,
            "flagged": [list(entry) for entry in c.flagged],
            "fraction_within_3sigma": c.fraction_within,
            "max_abs_z": c.max_abs_z,
            "rmse": c.rmse,
            "z": _matrix(c.z),
        }
    return {
        "block": report.block,
        "comparison": comparison,
        "config": config,
        "config_hash": digest,
        "converged_columns": report.converged_columns,
        "device_kind": device_kind,
        "diagonals": {
            str(offset): {"value": value.tolist(), "sigma": sigma.tolist()}
            for offset, (value, sigma) in report.diagonals().items()
        },
        "finite_difference_bias": report.finite_difference_bias,
        "g_hat": _matrix(report.g_hat),
        "g_sigma": _matrix(report.g_sigma),
        "guard": report.guard,
        "l_hat": _matrix(report.l_hat),
        "l_sigma": _matrix(report.l_sigma),
        "l_theory": _matrix(report.l_theory),
        "log_size": report.log_size,
        "method_requested": report.method_requested.value,
        "method_used": report.method_used.value,
        "outcomes": [
            outcome_record(n, table[n].estimate, table[n].counts, digest) for n in table.outcomes
        ],
        "quadrature_convention": QUADRATURE_CONVENTION,
        "seed": config.get("seed"),
        "series_n_used": report.n_used.tolist(),
        "series_tail_bound": _matrix(report.tail_bound),
        "size": report.size,
        "tau": report.tau,
    }
