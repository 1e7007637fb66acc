from pydantic import BaseModel, ConfigDict, Field
from typing import List, Optional


class _Report(BaseModel):
    # AIC sentinels and failed scores serialize as Infinity / -Infinity
    model_config = ConfigDict(ser_json_inf_nan="constants")


class Provenance(_Report):
    config_hash: str
    seed: int
    tool: str = "mapid"


class CandidateRecord(_Report):
    threshold: float
    expression_text: str
    k: int
    rss: float
    aic: float


class SimplificationReport(_Report):
    candidates: List[CandidateRecord]
    chosen_threshold: float
    refined_expression_text: str
    rss_before: float
    rss_after: float
    condition_flag: bool
    provenance: Optional[Provenance] = None


class EvalReport(_Report):
    rrmse: float = Field(..., ge=0)
    true_rrmse: Optional[float] = None
    val_mae: Optional[float] = None
    shadow_steps: Optional[int] = None
    escaped: Optional[bool] = None
    clean_rrmse: Optional[float] = None
    provenance: Optional[Provenance] = None


class InstanceRecord(_Report):
    instance_id: int
    fold_id: Optional[int] = None
    best_val_mae: Optional[float] = None
    convergence_epoch: Optional[int] = None
    aic_expression_text: Optional[str] = None
    aic_rrmse: Optional[float] = None
    refined_expression_text: Optional[str] = None
    refined_rrmse: Optional[float] = None
    val_rrmse: Optional[float] = None
    error: Optional[str] = None


class SigmaRecord(_Report):
    sigma: float
    status: str = "ok"  # ok | failed
    error: Optional[str] = None
    aic_expression_text: Optional[str] = None
    expression_text: Optional[str] = None
    chosen_threshold: Optional[float] = None
    val_mae: Optional[float] = None
    aic_rrmse: Optional[float] = None
    rrmse: Optional[float] = None
    true_rrmse: Optional[float] = None
    clean_rrmse: Optional[float] = None
    convergence_epoch: Optional[int] = None
    shadow_steps: Optional[int] = None
    escaped: Optional[bool] = None
    condition_flag: Optional[bool] = None
    best_instance: Optional[int] = None
    excluded_instances: int = 0
    instances: List[InstanceRecord] = Field(default_factory=list)


class ExperimentReport(_Report):
    name: str
    map: dict
    param_count: int
    provenance: Provenance
    records: List[SigmaRecord]

    @property
    def failed(self) -> bool:
        return all(r.status != "ok" for r in self.records)
