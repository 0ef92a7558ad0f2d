from typing import List, Optional

from fastapi import APIRouter, HTTPException, status
from pydantic import BaseModel, Field
import logging

from app.core.errors import ConfigurationError, DcgmmError, InvalidLabelError
from app.models.sampling import SamplingConfig
from app.services.inference_service import inference_service
from app.services.model_registry import model_registry

router = APIRouter(tags=["generation"])
logger = logging.getLogger(__name__)


class SampleRequest(BaseModel):
    count: int = Field(default=4, ge=1, le=100)
    label: Optional[int] = Field(default=None, ge=0, description="class for conditional sampling")
    sampling: SamplingConfig = Field(default_factory=lambda: SamplingConfig(sharpen_iters=0))


class SampleResponse(BaseModel):
    count: int
    dims: List[int]
    images: list


def require_checkpoint():
    checkpoint = model_registry.checkpoint
    if checkpoint is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail=model_registry.load_error or "no checkpoint configured",
        )
    return checkpoint


@router.post("/sample", response_model=SampleResponse)
async def sample(request: SampleRequest):
    """Draw samples (class-conditional when a label is given)."""
    checkpoint = require_checkpoint()
    try:
        if request.label is None:
            images = inference_service.sample(checkpoint.model, request.sampling, request.count)
        else:
            images = inference_service.conditional_sample(
                checkpoint.model, request.label, request.sampling, count=request.count
            )
    except (ConfigurationError, InvalidLabelError) as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except DcgmmError as e:
        logger.error(f"Sampling failed: {e}")
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(e))
    return SampleResponse(count=len(images), dims=list(images.dims), images=images.data[..., 0].tolist())
