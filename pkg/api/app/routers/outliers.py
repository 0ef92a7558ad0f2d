from typing import List

import numpy as np
from fastapi import APIRouter, HTTPException, status
from pydantic import BaseModel, Field
import logging

from app.core.errors import DcgmmError, ShapeError
from app.routers.generation import require_checkpoint
from app.services.inference_service import inference_service
from app.services.outlier_service import outlier_service

router = APIRouter(prefix="/outliers", tags=["outliers"])
logger = logging.getLogger(__name__)


class ScoreRequest(BaseModel):
    images: List[List[List[float]]] = Field(description="N x H x W gray values in [0, 1]")
    c: float = 0.0


@router.post("/score")
async def score(request: ScoreRequest):
    """Top-layer log-likelihoods and inlier verdicts for a batch of images."""
    checkpoint = require_checkpoint()
    if checkpoint.stats is None:
        raise HTTPException(status_code=status.HTTP_409_CONFLICT, detail="checkpoint carries no outlier statistics")
    model = checkpoint.model
    try:
        images = np.asarray(request.images, dtype=np.float64)[..., np.newaxis]
        model.check_input(images)
        scores = inference_service.score(model, images)
        verdict, _ = outlier_service.is_inlier(model, checkpoint.stats, images, request.c)
    except ShapeError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except (DcgmmError, ValueError) as e:
        logger.error(f"Scoring failed: {e}")
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    top = checkpoint.stats.layers[model.top_gmm_index]
    return {
        "scores": scores.tolist(),
        "inliers": verdict.tolist(),
        "c": request.c,
        "threshold": float(top.threshold(request.c).mean()),
    }
