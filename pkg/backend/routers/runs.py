"""Run routes - training runs found under the data directory."""

import logging

from fastapi import APIRouter, Depends, HTTPException, Query

from shared.utils.storage import LocalStorageBackend, read_metrics_csv

from .common import get_storage, lab_errors

logger = logging.getLogger(__name__)
router = APIRouter()


@router.get("")
def list_runs(
    limit: int = Query(50, ge=1, le=500, description="Number of runs to return"),
    storage: LocalStorageBackend = Depends(get_storage),
):
    """Runs (directories holding a metrics.csv) with their final losses, newest first."""
    with lab_errors("listing runs"):
        runs = storage.list_runs()[:limit]
        return {"runs": runs, "count": len(runs)}


@router.get("/{name:path}/metrics")
def run_metrics(name: str, storage: LocalStorageBackend = Depends(get_storage)):
    """Parsed metrics rows of one run; empty ``val_loss`` cells come back as null."""
    with lab_errors(f"reading metrics of {name}"):
        path = storage.resolve(name) / "metrics.csv"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"No metrics for run {name}")
        rows = read_metrics_csv(path)
        return {"name": name, "rows": rows, "count": len(rows)}
