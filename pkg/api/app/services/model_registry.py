import logging
from typing import Optional

from app.core.config import settings
from app.db.checkpoint_store import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)


class ModelRegistry:
    """Holds the checkpoint served by the API; loaded on first use."""

    def __init__(self, path: Optional[str] = None):
        self._path = path
        self._checkpoint: Optional[Checkpoint] = None
        self.load_error: Optional[str] = None

    @property
    def path(self) -> Optional[str]:
        return self._path or settings.CHECKPOINT_PATH

    def use(self, path: Optional[str]) -> None:
        """Point the registry at another checkpoint and drop the cached one."""
        self._path = path
        self._checkpoint = None
        self.load_error = None

    @property
    def checkpoint(self) -> Optional[Checkpoint]:
        if self._checkpoint is None and self.path:
            try:
                self._checkpoint = load_checkpoint(self.path)
                self.load_error = None
            except Exception as e:
                self.load_error = str(e)
                logger.error(f"Failed to load checkpoint {self.path}: {e}")
        return self._checkpoint


model_registry = ModelRegistry()
