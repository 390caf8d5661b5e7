"""Dependencies and error mapping shared by the routers."""

import logging
from contextlib import contextmanager

from fastapi import HTTPException

from shared.utils.errors import ConfigError, DomainError, NumericError, ShapeError
from shared.utils.storage import LocalStorageBackend

from ..config import settings

logger = logging.getLogger(__name__)


def get_storage() -> LocalStorageBackend:
    return LocalStorageBackend(settings.data_dir)


@contextmanager
def lab_errors(action: str):
    """Translate lab exceptions into HTTP errors: 400 for bad input, 422 for numeric failures."""
    try:
        yield
    except HTTPException:
        raise
    except (ConfigError, ShapeError, DomainError) as e:
        logger.warning(f"{action}: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except NumericError as e:
        logger.warning(f"{action}: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error {action}: {e}")
        raise HTTPException(status_code=500, detail=str(e))
