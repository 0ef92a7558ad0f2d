from fastapi import APIRouter
import logging

from app.services.model_registry import model_registry

router = APIRouter(tags=["health"])
logger = logging.getLogger(__name__)


@router.get("/health")
async def health():
    """Report whether a checkpoint is configured and loadable."""
    if not model_registry.path:
        return {"status": "degraded", "checkpoint": None, "message": "DCGMM_CHECKPOINT_PATH is not set"}
    checkpoint = model_registry.checkpoint
    if checkpoint is None:
        return {"status": "error", "checkpoint": model_registry.path, "message": model_registry.load_error}
    model = checkpoint.model
    return {
        "status": "ok",
        "checkpoint": model_registry.path,
        "architecture": model.arch.notation(),
        "gmm_layers": model.gmm_indices,
        "classifier": model.classifier is not None,
        "has_stats": checkpoint.stats is not None,
    }
