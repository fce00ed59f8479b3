from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from backend.app import models, schemas

# ========================
# RUN REGISTRY OPERATIONS
# ========================

def get_runs(db: Session, skip: int = 0, limit: int = 100) -> List[models.ReconstructionRun]:
    result = db.execute(
        select(models.ReconstructionRun)
        .order_by(models.ReconstructionRun.run_id)
        .offset(skip)
        .limit(limit)
    )
    return result.scalars().all()

def get_runs_by_hash(db: Session, config_hash: str) -> List[models.ReconstructionRun]:
    result = db.execute(
        select(models.ReconstructionRun).filter(models.ReconstructionRun.config_hash == config_hash)
    )
    return result.scalars().all()

def create_run(db: Session, run: schemas.RunCreate) -> models.ReconstructionRun:
    db_run = models.ReconstructionRun(**run.model_dump())
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run

def get_run_by_id(db: Session, run_id: int) -> Optional[models.ReconstructionRun]:
    result = db.execute(
        select(models.ReconstructionRun).filter(models.ReconstructionRun.run_id == run_id)
    )
    return result.scalars().first()

def delete_run(db: Session, run_id: int) -> bool:
    db_run = get_run_by_id(db, run_id)

    if db_run:
        db.delete(db_run)
        db.commit()
        return True

    return False
