"""Result tables written as CSV through pandas."""
import logging

import pandas as pd

from app.core.files import PathLike, atomic_write_text
from app.models.training import TrainingHistory
from app.services.metrics_service import RocCurve

logger = logging.getLogger(__name__)

ROC_COLUMNS = ["c", "threshold", "inlier_rate_inliers", "inlier_rate_outliers"]
METRICS_COLUMNS = ["architecture", "dataset", "dunn", "db"]


def write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.10g"))
    logger.info(f"Wrote {len(frame)} rows to {path}")


def history_frame(history: TrainingHistory) -> pd.DataFrame:
    return history.to_frame()


def roc_frame(curve: RocCurve) -> pd.DataFrame:
    return pd.DataFrame(curve.points, columns=ROC_COLUMNS)


def metrics_frame(architecture: str, dataset: str, dunn: float, db: float) -> pd.DataFrame:
    return pd.DataFrame([[architecture, dataset, dunn, db]], columns=METRICS_COLUMNS)
