from datetime import datetime
from typing import Any, Dict

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """Reproducibility envelope written next to every output set."""
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started_at: datetime
    wall_clock_seconds: float = 0.0
    checksums: Dict[str, str] = Field(default_factory=dict)
    results: Dict[str, Any] = Field(default_factory=dict)
