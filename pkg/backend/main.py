"""
Head-squeezing lab API - FastAPI backend service.

This service provides:
- Analysis routes (head similarity reports, synthetic dumps)
- Oracle routes (reference-solver checks on dumped attention)
- Run routes (training runs and their metrics)
"""

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from .config import settings
import logging

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title="Head-Squeezing Lab API",
    description="Attention-map compression analysis and distillation run browser",
    version="1.0.0",
    docs_url=f"{settings.api_prefix}/docs",
    redoc_url=f"{settings.api_prefix}/redoc"
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.on_event("startup")
async def startup_event():
    """Log the service configuration on startup."""
    logger.info("Starting Head-Squeezing Lab API...")
    logger.info(f"CORS origins: {settings.cors_origins}")
    logger.info(f"Data directory: {settings.data_dir}")


@app.get("/")
async def root():
    """Root endpoint."""
    return {
        "message": "Head-Squeezing Lab API",
        "version": "1.0.0",
        "docs": f"{settings.api_prefix}/docs"
    }


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {
        "status": "healthy",
        "data_dir": settings.data_dir
    }


# Import and include routers
from .routers import analysis, oracle, runs

app.include_router(analysis.router, prefix=f"{settings.api_prefix}/analysis", tags=["Analysis"])
app.include_router(oracle.router, prefix=f"{settings.api_prefix}/oracle", tags=["Oracle"])
app.include_router(runs.router, prefix=f"{settings.api_prefix}/runs", tags=["Runs"])


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "backend.main:app",
        host=settings.host,
        port=settings.port,
        reload=True
    )
