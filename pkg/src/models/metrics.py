from typing import List, Optional

from pydantic import BaseModel, Field


class IdentityMetrics(BaseModel):
    identity: str
    views: int
    cd: Optional[float] = Field(None, ge=0)
    psnr_train: Optional[float] = None
    psnr_novel: Optional[float] = None


class MetricsReport(BaseModel):
    """Per-identity metrics plus an aggregate row (identity "all"); cd in squared scene units"""
    stage: int
    identities: List[IdentityMetrics]
    aggregate: IdentityMetrics


class GradcheckTerm(BaseModel):
    name: str
    order: int = Field(1, ge=1, le=2)
    tolerance: float
    checked: int
    max_rel_error: float
    unreached: List[str] = Field(default_factory=list)  # zero autograd gradient, nonzero finite difference

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and not self.unreached


class GradcheckReport(BaseModel):
    """Analytic parameter gradients vs central finite differences, per loss term"""
    step_size: float
    tolerance: float
    second_order_tolerance: float
    terms: List[GradcheckTerm]
    max_rel_error: float
    first_order_max_rel_error: float
    second_order_max_rel_error: float
    passed: bool
