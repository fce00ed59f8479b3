from fastapi import FastAPI, Depends, HTTPException, Query
from sqlalchemy.orm import Session
from typing import List
from contextlib import asynccontextmanager
import logging
import sys
from pathlib import Path

import numpy as np

current_file = Path(__file__)
backend_dir = current_file.parent
project_root = backend_dir.parent

sys.path.insert(0, str(project_root))

from backend.app import schemas, crud
from backend.app.database import get_db
from backend.app.errors import ConfigError, IncompleteDataError, InvalidInputError, LiouvilleError, NumericalError
from backend.app.experiment import build_device
from backend.app.homodyne import pattern_functions
from backend.app.twinbeam import TwinBeamConfig, outcome_probabilities, retained_outcomes

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("Starting up Liouville reconstruction API...")

    try:
        from backend.app.init_db import init_db
        init_db()
    except Exception:
        logger.exception("Run registry initialization failed")
        raise

    yield

    logger.info("Shutting down Liouville reconstruction API...")

app = FastAPI(
    title="Liouville Reconstruction API",
    lifespan=lifespan
)


def raise_http(exc: LiouvilleError):
    if isinstance(exc, (InvalidInputError, ConfigError)):
        raise HTTPException(status_code=422, detail=str(exc))
    if isinstance(exc, IncompleteDataError):
        raise HTTPException(status_code=409, detail=str(exc))
    if isinstance(exc, NumericalError):
        raise HTTPException(status_code=500, detail=str(exc))
    raise HTTPException(status_code=500, detail=f"internal error: {exc}")


@app.get("/")
def root():
    return {"message": "Liouville reconstruction API is running"}

@app.get("/health")
def health_check():
    return {"status": "healthy", "message": "API is running normally"}

# ========================
# THEORY
# ========================

@app.post("/theory", response_model=schemas.TheoryResponse)
def theory(request: schemas.TheoryRequest):
    problems = schemas.desk_scale_problems(request.device)
    if problems:
        raise HTTPException(status_code=422, detail=f"{', '.join(problems)} exceed desk scale")
    try:
        device = build_device(request.device)
    except LiouvilleError as exc:
        raise_http(exc)
    return schemas.TheoryResponse(
        kind=device.kind,
        dim=device.dim,
        tau=device.tau,
        green=device.green.g.tolist(),
        green_sigma=None if device.green_sigma is None else device.green_sigma.tolist(),
        liouvillian=None if device.liouvillian is None else device.liouvillian.l.tolist(),
    )

@app.post("/twin-beam/outcomes", response_model=schemas.OutcomesResponse)
def twin_beam_outcomes(request: schemas.OutcomesRequest):
    block = request.twin_beam
    try:
        cfg = TwinBeamConfig(block.kappa2, block.eta_d, block.n_outcome_max)
    except LiouvilleError as exc:
        raise_http(exc)
    return schemas.OutcomesResponse(
        probabilities=outcome_probabilities(cfg, request.n_max).tolist(),
        retained=retained_outcomes(cfg),
    )

@app.get("/patterns", response_model=schemas.PatternsResponse)
def patterns(
    n_max: int = Query(default=10, ge=0, le=60),
    x_max: float = Query(default=6.0, gt=0, le=40),
    points: int = Query(default=201, ge=2, le=10_001),
):
    x = np.linspace(-x_max, x_max, points)
    return schemas.PatternsResponse(x=x.tolist(), values=pattern_functions(n_max, x).tolist())

# ========================
# RUN REGISTRY
# ========================

@app.get("/runs/", response_model=List[schemas.RunResponse])
def get_runs(skip: int = 0, limit: int = 100, db: Session = Depends(get_db)):
    return crud.get_runs(db, skip=skip, limit=limit)

@app.get("/runs/{run_id}", response_model=schemas.RunResponse)
def get_run(run_id: int, db: Session = Depends(get_db)):
    run = crud.get_run_by_id(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run

@app.delete("/runs/{run_id}")
def delete_run(run_id: int, db: Session = Depends(get_db)):
    success = crud.delete_run(db, run_id)
    if not success:
        raise HTTPException(status_code=404, detail="Run not found")
    return {"message": "Run deleted"}
