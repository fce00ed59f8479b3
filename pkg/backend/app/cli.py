"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 incomplete data, 4 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from . import crud, schemas, serialization
from .devices import ExtractionMethod, LaserParams, laser_green_qjump
from .errors import ConfigError, IncompleteDataError, LiouvilleError
from .experiment import (
    build_device,
    compare,
    experiment_config,
    reconstruct_green,
    run_experiment,
)
from .homodyne import biorthogonality_matrix, pattern_functions

logger = logging.getLogger(__name__)

EXIT_OK = 0


# ========================
# CONFIG LOADING
# ========================

def _validation_message(exc: ValidationError) -> str:
    lines = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"{location}: {error['msg']}")
    return "; ".join(lines)


def load_config(
    path: Path,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> schemas.ConfigFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if isinstance(data, dict):
        if seed is not None:
            data["seed"] = seed
        if workers is not None:
            data["workers"] = workers
        if output_dir is not None:
            data["output_dir"] = output_dir
    try:
        return schemas.ConfigFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {_validation_message(exc)}") from exc


def require_blocks(cfg: schemas.ConfigFile, *names: str) -> None:
    missing = [name for name in names if getattr(cfg, name) is None]
    if missing:
        raise ConfigError(f"config is missing required block(s): {', '.join(missing)}")


def enforce_desk_scale(cfg: schemas.ConfigFile, full_scale: bool) -> None:
    """Reject data volumes beyond desk scale unless explicitly lifted."""
    problems = schemas.desk_scale_problems(cfg.device, cfg.homodyne)
    if not problems:
        return
    if not full_scale:
        raise ConfigError(f"{', '.join(problems)} exceed desk scale; pass --full-scale to run anyway")
    logger.warning("running beyond desk scale (%s)", ", ".join(problems))


def _echo(cfg: schemas.ConfigFile) -> dict:
    return cfg.model_dump(mode="json", exclude=set(serialization.HASH_EXCLUDED))


def _hash(cfg: schemas.ConfigFile) -> str:
    return serialization.config_hash(_echo(cfg))


def _output_dir(cfg: schemas.ConfigFile) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ========================
# SUBCOMMANDS
# ========================

def cmd_theory(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers, args.out)
    enforce_desk_scale(cfg, args.full_scale)
    digest = _hash(cfg)
    device = build_device(cfg.device, cfg.workers)
    out = _output_dir(cfg)

    serialization.write_matrix_csv(out / "G_theory.csv", device.green.g, device.green_sigma, digest)
    if device.liouvillian is not None:
        serialization.write_matrix_csv(out / "L_theory.csv", device.liouvillian.l, None, digest)
    if args.qjump and cfg.device.kind == "laser":
        spec = cfg.device
        params = LaserParams(
            spec.c_coop, spec.n_sat, spec.sigma0, spec.f_ratio, spec.gamma_cav, spec.t_star,
            spec.coupling_scale,
        )
        green, sigma = laser_green_qjump(
            params, spec.dim, spec.atom_init, spec.n_traj, spec.qjump_seed, cfg.workers, spec.guard,
        )
        serialization.write_matrix_csv(out / "G_theory_qjump.csv", green.g, sigma, digest)
    print(f"theory for {device.kind} (dim={device.dim}, tau={device.tau:g}) written to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers, args.out)
    require_blocks(cfg, "twin_beam", "homodyne")
    enforce_desk_scale(cfg, args.full_scale)
    digest = _hash(cfg)
    device = build_device(cfg.device, cfg.workers)
    experiment = experiment_config(cfg, device, keep_samples=args.raw)
    raw = run_experiment(experiment)

    out = _output_dir(cfg)
    written = serialization.write_outcome_table(out, raw.table, digest)
    if args.raw:
        serialization.write_quadratures_csv(out / "quadratures.csv", raw.batches, digest)
    print(f"{len(written)} outcome files written to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config, args.seed, args.workers, args.out)
    require_blocks(cfg, "twin_beam", "homodyne")
    digest = _hash(cfg)
    table, data_digest = serialization.read_outcome_table(Path(args.data))
    if data_digest and data_digest != digest:
        logger.warning("dataset was produced by config %s, reconstructing with %s", data_digest[:12], digest[:12])
    device = build_device(cfg.device, cfg.workers)
    experiment = experiment_config(cfg, device)
    if table.dim < experiment.size:
        raise IncompleteDataError(
            f"dataset estimates photon numbers up to {table.dim - 1}, config needs {experiment.size - 1}"
        )
    report = reconstruct_green(
        table,
        experiment.twin_beam,
        experiment.reconstruction,
        experiment.size,
        device.tau,
        device.liouvillian,
        tridiagonal=device.kind == "pia",
    )

    out = _output_dir(cfg)
    report_path = out / "report.json"
    serialization.write_json(
        report_path, serialization.report_to_dict(report, _echo(cfg), digest, device.kind)
    )
    serialization.write_matrix_csv(out / "L_hat.csv", report.l_hat, report.l_sigma, digest)
    serialization.write_matrix_csv(out / "G_hat.csv", report.g_hat, report.g_sigma, digest)
    summary = report.comparison
    if summary is not None:
        serialization.write_matrix_csv(out / "z.csv", summary.z, None, digest)
        serialization.write_matrix_csv(out / "L_theory.csv", report.l_theory, None, digest)
        print(
            f"{report.block}x{report.block} block: rmse={summary.rmse:.4g} "
            f"max|z|={summary.max_abs_z:.3g} within 3 sigma={100 * summary.fraction_within:.1f}%"
        )
    print(f"method: {report.method_used.value}; report written to {report_path}")

    if args.record:
        from .database import SessionLocal
        from .init_db import init_db

        init_db()
        with SessionLocal() as db:
            run = crud.create_run(db, schemas.RunCreate(
                config_hash=digest,
                seed=cfg.seed,
                device_kind=device.kind,
                method_used=report.method_used.value,
                block_size=report.block,
                rmse=summary.rmse if summary else None,
                max_abs_z=summary.max_abs_z if summary else None,
                fraction_within=summary.fraction_within if summary else None,
                chi2_pvalue=summary.chi2_pvalue if summary else None,
                wall_clock=report.elapsed,
                report_path=str(report_path.resolve()),
            ))
            print(f"recorded run {run.run_id}")
    return EXIT_OK


def cmd_compare(args) -> int:
    path = Path(args.report)
    try:
        report = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    block = report["block"]
    l_hat = np.array(report["l_hat"])[:block, :block]
    l_sigma = np.array(report["l_sigma"])[:block, :block]
    if args.theory:
        l_theory, _ = serialization.read_matrix_csv(Path(args.theory))
        l_theory = l_theory[:block, :block]
    elif report.get("l_theory") is not None:
        l_theory = np.array(report["l_theory"])
    else:
        raise ConfigError("report carries no theory Liouvillian; pass --theory")
    summary = compare(
        l_hat, l_sigma, l_theory,
        tridiagonal=report.get("device_kind") == "pia",
        biased=report.get("method_used") == ExtractionMethod.FINITE_DIFFERENCE.value,
    )

    data = {
        "biased": summary.biased,
        "block": block,
        "chi2_dof": summary.chi2_dof,
        "chi2_pvalue": summary.chi2_pvalue,
        "config_hash": report.get("config_hash", ""),
        "flagged": [list(entry) for entry in summary.flagged],
        "fraction_within_3sigma": summary.fraction_within,
        "max_abs_z": summary.max_abs_z,
        "rmse": summary.rmse,
    }
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    serialization.write_json(out / "summary.json", data)
    print(f"rmse               {summary.rmse:.6g}")
    print(f"max |z|            {summary.max_abs_z:.4g}")
    print(f"fraction |z| <= 3  {summary.fraction_within:.4f}")
    print(f"flagged entries    {summary.flagged}")
    if summary.chi2_pvalue is not None:
        print(f"off-tridiagonal chi2 = {summary.chi2_stat:.4g} ({summary.chi2_dof} dof), p = {summary.chi2_pvalue:.4g}")
    return EXIT_OK


def cmd_patterns(args) -> int:
    if args.n_max < 0 or args.points < 2 or args.x_max <= 0:
        raise ConfigError("need n_max >= 0, points >= 2 and x_max > 0")
    x = np.linspace(-args.x_max, args.x_max, args.points)
    values = pattern_functions(args.n_max, x)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "patterns.csv", "w") as handle:
        handle.write(",".join(["x"] + [f"f{n}" for n in range(args.n_max + 1)]) + "\n")
        for i, point in enumerate(x):
            handle.write(",".join(format(v, ".17g") for v in [point, *values[:, i]]) + "\n")

    overlap = biorthogonality_matrix(args.n_max)
    deviation = np.abs(overlap - np.eye(args.n_max + 1)).max()
    print(f"vacuum check: integral f_00 psi_0^2 = {overlap[0, 0]:.12f}")
    print(f"biorthogonality: max |int f_nn psi_m^2 - delta_nm| = {deviation:.3e} (n, m <= {args.n_max})")
    print(f"patterns written to {out / 'patterns.csv'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("backend.main:app", host=args.host, port=args.port)
    return EXIT_OK


# ========================
# ENTRY POINT
# ========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="liouville",
        description="Reconstruct the Liouvillian of phase-insensitive optical devices from twin-beam homodyne data.",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides the file)")
        p.add_argument("--workers", type=int, help="worker processes (overrides the file)")
        p.add_argument("--full-scale", action="store_true", help="lift the desk-scale caps")
        return p

    theory = with_config(sub.add_parser("theory", help="write theoretical G and L"))
    theory.add_argument("--qjump", action="store_true", help="laser only: add the quantum-jump green matrix")
    theory.set_defaults(func=cmd_theory)

    simulate = with_config(sub.add_parser("simulate", help="simulate conditioned homodyne data"))
    simulate.add_argument("--raw", action="store_true", help="also dump raw quadratures")
    simulate.set_defaults(func=cmd_simulate)

    reconstruct = with_config(sub.add_parser("reconstruct", help="reconstruct G and L from a dataset"))
    reconstruct.add_argument("--data", required=True, help="directory holding outcome_*.json files")
    reconstruct.add_argument("--record", action="store_true", help="record the run in the registry")
    reconstruct.set_defaults(func=cmd_reconstruct)

    comparison = sub.add_parser("compare", help="compare a report with a theory Liouvillian")
    comparison.add_argument("--report", required=True)
    comparison.add_argument("--theory", help="L_theory.csv; defaults to the theory inside the report")
    comparison.add_argument("--out")
    comparison.set_defaults(func=cmd_compare)

    patterns = sub.add_parser("patterns", help="tabulate pattern functions")
    patterns.add_argument("--n-max", type=int, default=10)
    patterns.add_argument("--x-max", type=float, default=6.0)
    patterns.add_argument("--points", type=int, default=601)
    patterns.add_argument("--out")
    patterns.set_defaults(func=cmd_patterns)

    serve = sub.add_parser("serve", help="start the query API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LiouvilleError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
