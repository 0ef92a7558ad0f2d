from typing import Optional

from pydantic import BaseModel, Field


class SamplingConfig(BaseModel):
    """Settings shared by every top-down pass.

    top_s = None leaves component selection unrestricted (S = K).
    variant_cutoff uses 1-based layer numbers; the input is layer 0.
    """
    top_s: Optional[int] = Field(default=None, ge=1)
    sharpen_iters: int = Field(default=1000, ge=0)
    sharpen_step: float = Field(default=0.1, ge=0.0)
    max_backtracks: int = Field(default=20, ge=0)
    variant_cutoff: Optional[int] = Field(default=None, ge=0)
    stochastic: bool = False
    seed: int = Field(default=0, ge=0)
