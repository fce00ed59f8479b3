from datetime import datetime

from sqlalchemy import Column, Float, Integer, String, Text, TIMESTAMP

from .database import Base


# ========================
# RUN REGISTRY
# ========================

class ReconstructionRun(Base):
    __tablename__ = "reconstruction_run"

    run_id = Column(Integer, primary_key=True, index=True)
    created_at = Column(TIMESTAMP, nullable=False, default=datetime.utcnow)
    config_hash = Column(String(64), nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    device_kind = Column(String(20), nullable=False)
    method_used = Column(String(30), nullable=False)
    block_size = Column(Integer, nullable=False)
    rmse = Column(Float)
    max_abs_z = Column(Float)
    fraction_within = Column(Float)
    chi2_pvalue = Column(Float)
    wall_clock = Column(Float, nullable=False)
    report_path = Column(Text, nullable=False)
