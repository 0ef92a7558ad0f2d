import logging
from fastapi import FastAPI
from dotenv import load_dotenv

from app.routers import generation, health, outliers
from app.services.model_registry import model_registry
from app.core.config import settings

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=settings.LOG_LEVEL.upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
)

logger = logging.getLogger(__name__)

app = FastAPI(
    title="DCGMM API",
    description="Sampling and outlier scoring with deep convolutional Gaussian mixture models",
    version="0.1.0",
)

# Include routers
app.include_router(health.router, prefix="/api")
app.include_router(generation.router, prefix="/api")
app.include_router(outliers.router, prefix="/api")


@app.on_event("startup")
async def startup_event():
    """Load the configured checkpoint eagerly so failures show up in the log."""
    logger.info("Starting application...")
    if model_registry.path:
        if model_registry.checkpoint is not None:
            logger.info(f"Serving checkpoint {model_registry.path}")
        else:
            logger.warning("Checkpoint could not be loaded; generation endpoints will return 503")
    else:
        logger.warning("DCGMM_CHECKPOINT_PATH is not set; generation endpoints will return 503")


@app.get("/")
async def root():
    """Root endpoint for quick API check."""
    return {
        "message": "Welcome to the DCGMM API",
        "version": "0.1.0",
        "status": "online",
        "checkpoint": model_registry.path,
    }
