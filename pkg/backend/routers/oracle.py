"""Oracle routes - sandwich checks on dumped attention."""

import logging
from typing import List

from fastapi import APIRouter, Depends
from pydantic import BaseModel, Field

from shared.schemas.reports import SandwichReport
from shared.utils.storage import LocalStorageBackend

from ..config import settings
from ..services.oracle import check_instance, load_instance
from .common import get_storage, lab_errors

logger = logging.getLogger(__name__)
router = APIRouter()


class OracleRequest(BaseModel):
    dump: str
    layer: int = Field(0, ge=0)
    group: List[int] = Field(default_factory=lambda: [0, 1])
    sample: int = Field(0, ge=0)
    mode: str = "all"


@router.post("/check", response_model=SandwichReport)
def oracle_check(request: OracleRequest, storage: LocalStorageBackend = Depends(get_storage)):
    """
    Run the reference solvers on one head group and check their ordering.

    A failed chain is reported with ``passed: false``, not as an HTTP error.
    """
    with lab_errors(f"checking {request.dump} layer {request.layer}"):
        inst = load_instance(storage.resolve(request.dump), request.layer, request.group, request.sample)
        return check_instance(
            inst,
            request.mode,
            grid_step=settings.oracle_grid_step,
            max_iters=settings.oracle_max_iters,
            tol=settings.oracle_tol,
        )
