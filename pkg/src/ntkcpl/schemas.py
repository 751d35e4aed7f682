"""Request and response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, model_validator

from .harness import ExperimentConfig, NTKOptions
from .model import TrainConfig
from .strategies import StrategySpec

Format = Literal["binary", "csv"]


class ErrorBody(BaseModel):
    error: str
    kind: str
    exit_code: int


class IngestRequest(BaseModel):
    input_path: str
    output_path: str
    input_format: Format | None = None
    output_format: Format | None = None
    num_classes: int = Field(0, ge=0)


class IngestResponse(BaseModel):
    output_path: str
    n: int
    dim: int
    labeled: bool
    num_classes: int


class RunRequest(BaseModel):
    config: ExperimentConfig


class RunResponse(BaseModel):
    records: list[dict]
    outputs: dict[str, str] = {}


class StateSpec(BaseModel):
    """An active-learning state: pool features plus the labels gathered so far."""

    pool_path: str
    format: Format | None = None
    labeled: list[int] = []
    labels: list[int] = []
    round: int = Field(0, ge=0)
    initial_budget: int = Field(1, ge=1)
    seed: int = 0
    classifier_path: str | None = None

    @model_validator(mode="after")
    def _pairs(self):
        if len(self.labeled) != len(self.labels):
            raise ValueError("labeled and labels must have the same length")
        if len(set(self.labeled)) != len(self.labeled):
            raise ValueError("labeled indices must be distinct")
        return self


class RoundOptions(BaseModel):
    candidate_size: int = Field(10000, ge=1)
    c_max: int = Field(100, ge=1)
    n_clusters: int | None = Field(None, ge=1)
    hidden_width: int = Field(64, ge=1)
    train: TrainConfig = TrainConfig()
    ntk: NTKOptions = NTKOptions()
    n_jobs: int = Field(1, ge=1)


class SelectRequest(BaseModel):
    state: StateSpec
    budget: int = Field(ge=1)
    strategy: StrategySpec = StrategySpec()
    options: RoundOptions = RoundOptions()


class SelectResponse(BaseModel):
    selected: list[int]
    strategy: str
    round: int
    n_clusters: int
    candidate_size: int
    wallclock_select_seconds: float


class DiagnoseRequest(BaseModel):
    state: StateSpec
    strategy: StrategySpec = StrategySpec()
    options: RoundOptions = RoundOptions()


class DiagnosticReport(BaseModel):
    round: int
    total_labels: int
    n_clusters: int
    estimated_coverage: float
    true_coverage: float | None
    ntk_true_coverage: float | None
    agreement_rate: float | None
    p_nff: float
    p_fnf: float
    error_cpl: float
    impurity_share: float
    overclustering_share: float
    n: int
    n_nff: int
    n_fnf: int


class ReportRequest(BaseModel):
    records_paths: list[str] = Field(min_length=1)
    output_dir: str
    baseline: str = "random"


class ReportResponse(BaseModel):
    outputs: dict[str, str]
    effective_budget_ratio: dict[str, float]
    n_records: int
