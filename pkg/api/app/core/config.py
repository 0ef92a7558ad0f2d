from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings."""
    # Reproducibility
    SEED: int = Field(default=0, ge=0)
    THREADS: int = Field(default=1, ge=1)

    # Logging
    LOG_LEVEL: str = "INFO"

    # Checkpoint served by the HTTP API
    CHECKPOINT_PATH: Optional[str] = None

    # Directory holding the IDX files (train-images-idx3-ubyte, ...)
    DATA_DIR: Optional[str] = None

    # Numerics
    P_MIN: float = Field(default=1e-3, gt=0.0)
    METRICS_CHUNK_SIZE: int = Field(default=256, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="DCGMM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Initialize settings
settings = Settings()
