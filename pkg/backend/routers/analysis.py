"""Analysis routes - head redundancy reports and synthetic dumps."""

import logging

from fastapi import APIRouter, Depends
from pydantic import BaseModel, Field

from shared.schemas.dump import DumpManifest
from shared.schemas.reports import AnalysisReport
from shared.utils.storage import LocalStorageBackend

from ..services.analyzer import analyze_dump, make_random_dump
from .common import get_storage, lab_errors

logger = logging.getLogger(__name__)
router = APIRouter()


# Request models
class ReportRequest(BaseModel):
    dump: str


class RandomDumpRequest(BaseModel):
    out: str
    layers: int = Field(2, ge=1, le=64)
    heads: int = Field(4, ge=1, le=64)
    seq_len: int = Field(8, ge=1, le=256)
    d_model: int = Field(16, ge=1, le=1024)
    seed: int = 0
    causal: bool = False


@router.post("/report", response_model=AnalysisReport)
def analysis_report(request: ReportRequest, storage: LocalStorageBackend = Depends(get_storage)):
    """
    Head-similarity matrices and alpha histograms of a dump.

    Args:
        request: ``dump`` is a directory relative to the data directory

    Returns:
        Per-layer similarity, mean off-diagonal similarity and alpha histogram
    """
    with lab_errors(f"analyzing {request.dump}"):
        return analyze_dump(storage.resolve(request.dump))


@router.post("/random-dump", response_model=DumpManifest)
def random_dump(request: RandomDumpRequest, storage: LocalStorageBackend = Depends(get_storage)):
    """Write a seeded synthetic dump under the data directory."""
    with lab_errors(f"generating dump {request.out}"):
        return make_random_dump(
            storage.resolve(request.out),
            layers=request.layers,
            heads=request.heads,
            seq_len=request.seq_len,
            d_model=request.d_model,
            seed=request.seed,
            causal=request.causal,
        )
