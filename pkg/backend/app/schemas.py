from datetime import datetime
from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .devices import AtomInit, ExtractionMethod
from .parallel import default_workers

DESK_MAX_SAMPLES = 1_000_000
DESK_MAX_TRAJECTORIES = 100_000
DESK_MAX_DIM = 64


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ========================
# DEVICE BLOCKS
# ========================

class PiaDevice(StrictModel):
    kind: Literal["pia"]
    a_gain: float = Field(ge=0)
    b_loss: float = Field(ge=0)
    tau: float = Field(default=1.0, gt=0)
    dim: int = Field(ge=2)


class LaserDevice(StrictModel):
    kind: Literal["laser"]
    c_coop: float = Field(gt=0)
    n_sat: float = Field(gt=0)
    sigma0: float = Field(ge=-1, le=1)
    f_ratio: float = Field(gt=0)
    gamma_cav: float = Field(gt=0)
    t_star: float = Field(ge=0)
    coupling_scale: float = Field(default=1.0, ge=0)
    dim: int = Field(ge=2)
    atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE
    solver: Literal["ode", "qjump"] = "ode"
    n_traj: int = Field(default=10_000, ge=1)
    qjump_seed: int = Field(default=0, ge=0)
    guard: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def guard_inside_dim(self):
        if self.guard >= self.dim:
            raise ValueError(f"guard {self.guard} leaves no computed input for dim = {self.dim}")
        return self

    @property
    def tau(self) -> float:
        return self.t_star


class GreenCsvDevice(StrictModel):
    kind: Literal["green_csv"]
    path: str
    tau: float = Field(gt=0)
    dim: int = Field(ge=1)


DeviceSpec = Annotated[Union[PiaDevice, LaserDevice, GreenCsvDevice], Field(discriminator="kind")]
# devices the HTTP API builds; files on the server are not read on request
ApiDeviceSpec = Annotated[Union[PiaDevice, LaserDevice], Field(discriminator="kind")]


# ========================
# EXPERIMENT BLOCKS
# ========================

class TwinBeamBlock(StrictModel):
    kappa: Optional[float] = Field(default=None, ge=0, lt=1)
    kappa2: Optional[float] = Field(default=None, ge=0, lt=1)
    eta_d: float = Field(gt=0, le=1)
    n_outcome_max: int = Field(default=12, ge=0)

    @model_validator(mode="after")
    def one_gain_parameter(self):
        if (self.kappa is None) == (self.kappa2 is None):
            raise ValueError("give exactly one of kappa or kappa2")
        if self.kappa2 is None:
            self.kappa2 = self.kappa ** 2
            self.kappa = None
        return self


class HomodyneBlock(StrictModel):
    eta_h: float = Field(gt=0.5, le=1)
    k_max: int = Field(ge=0)
    samples_per_state: int = Field(ge=0)
    blocks: int = Field(default=4, ge=2)
    bernoulli_margin: int = Field(default=8, ge=0)


class ReconstructionBlock(StrictModel):
    n_max: Optional[int] = Field(default=None, ge=0)
    tail_epsilon: float = Field(default=1e-9, gt=0)
    hard_cap: int = Field(default=200, ge=1)
    tail_tolerance: float = Field(default=1e-4, gt=0)
    min_snr: float = Field(default=5.0, ge=0)
    guard: int = Field(default=4, ge=0)
    method: ExtractionMethod = ExtractionMethod.MATRIX_LOG
    allow_fallback: bool = True
    outcome_floor: float = Field(default=1e-4, gt=0, lt=1)
    allocation: Literal["equal", "weighted"] = "equal"


class ConfigFile(StrictModel):
    device: DeviceSpec
    twin_beam: Optional[TwinBeamBlock] = None
    homodyne: Optional[HomodyneBlock] = None
    reconstruction: ReconstructionBlock = Field(default_factory=ReconstructionBlock)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default_factory=default_workers, ge=1)
    output_dir: str = "out"

    @model_validator(mode="after")
    def consistent_dimensions(self):
        if self.twin_beam is None or self.homodyne is None:
            return self
        k_max = self.homodyne.k_max
        guard = self.reconstruction.guard
        needed = k_max + self.twin_beam.n_outcome_max + guard
        if needed > self.device.dim:
            raise ValueError(
                f"k_max + n_outcome_max + guard = {needed} exceeds device.dim = {self.device.dim}"
            )
        if k_max + 1 - guard < 1:
            raise ValueError(f"guard {guard} leaves no reported block for k_max = {k_max}")
        return self


def desk_scale_problems(device, homodyne: Optional[HomodyneBlock] = None) -> List[str]:
    """Settings that go beyond desk-scale data volume or truncation."""
    problems = []
    if device.dim > DESK_MAX_DIM:
        problems.append(f"device.dim={device.dim}")
    if homodyne is not None and homodyne.samples_per_state > DESK_MAX_SAMPLES:
        problems.append(f"homodyne.samples_per_state={homodyne.samples_per_state}")
    if device.kind == "laser" and device.n_traj > DESK_MAX_TRAJECTORIES:
        problems.append(f"device.n_traj={device.n_traj}")
    return problems


# ========================
# FILE RECORDS
# ========================

class OutcomeRecord(StrictModel):
    n: int = Field(ge=0)
    counts: int = Field(ge=0)
    r: List[float]
    sigma: List[float]
    blocks: Optional[List[List[float]]] = None
    config_hash: str = ""

    @model_validator(mode="after")
    def same_length(self):
        if len(self.r) != len(self.sigma):
            raise ValueError("r and sigma must have the same length")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma must be nonnegative")
        if self.blocks is not None:
            if len(self.blocks) < 2:
                raise ValueError("per-block estimates need at least 2 blocks")
            if any(len(block) != len(self.r) for block in self.blocks):
                raise ValueError("every per-block estimate must have the length of r")
        return self


# ========================
# API BODIES
# ========================

class TheoryRequest(StrictModel):
    device: ApiDeviceSpec


class TheoryResponse(BaseModel):
    kind: str
    dim: int
    tau: float
    green: List[List[float]]
    green_sigma: Optional[List[List[float]]] = None
    liouvillian: Optional[List[List[float]]] = None


class OutcomesRequest(StrictModel):
    twin_beam: TwinBeamBlock
    n_max: int = Field(default=20, ge=0, le=1000)


class OutcomesResponse(BaseModel):
    probabilities: List[float]
    retained: List[int]


class PatternsResponse(BaseModel):
    x: List[float]
    values: List[List[float]]


# ========================
# RUN REGISTRY
# ========================

class RunBase(BaseModel):
    config_hash: str
    seed: int
    device_kind: str
    method_used: str
    block_size: int
    rmse: Optional[float] = None
    max_abs_z: Optional[float] = None
    fraction_within: Optional[float] = None
    chi2_pvalue: Optional[float] = None
    wall_clock: float
    report_path: str


class RunCreate(RunBase):
    pass


class RunResponse(RunBase):
    run_id: int
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)
