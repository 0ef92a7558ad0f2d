from typing import Dict, List, Literal, Optional

import pandas as pd
from pydantic import BaseModel, Field, model_validator

LossMode = Literal["full", "max_component"]


class AnnealingConfig(BaseModel):
    """Neighbourhood smoothing of the max-component loss.

    sigma_0 = None means 2 * sqrt(K) / 6 for each GMM layer.
    """
    sigma_0: Optional[float] = Field(default=None, gt=0.0)
    sigma_inf: float = Field(default=0.01, gt=0.0)
    decay: float = Field(default=0.9, gt=0.0, le=1.0)
    stagnation_threshold: float = Field(default=0.05, ge=0.0)


class TrainingConfig(BaseModel):
    """Knobs for end-to-end SGD training."""
    epochs: int = Field(default=25, ge=1)
    batch_size: int = Field(default=100, ge=1)
    gmm_learning_rate: float = Field(default=0.011, gt=0.0)
    classifier_learning_rate: float = Field(default=0.05, gt=0.0)
    layer_learning_rates: Dict[int, float] = Field(default_factory=dict)
    phase1_fraction: float = Field(default=0.4, ge=0.0, lt=1.0)
    stats_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    loss_mode: LossMode = "max_component"
    annealing: AnnealingConfig = Field(default_factory=AnnealingConfig)
    seed: int = Field(default=0, ge=0)
    p_min: float = Field(default=1e-3, gt=0.0)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def rates_positive(self):
        for index, rate in self.layer_learning_rates.items():
            if rate <= 0:
                raise ValueError(f"learning rate for layer {index} must be > 0")
        return self

    def learning_rate(self, layer_index: int, default: float) -> float:
        return self.layer_learning_rates.get(layer_index, default)

    @property
    def phase1_epochs(self) -> int:
        return int(self.phase1_fraction * self.epochs)

    @property
    def stats_start_epoch(self) -> int:
        window = max(1, int(round(self.stats_fraction * self.epochs)))
        return self.epochs - window


class EpochRecord(BaseModel):
    epoch: int
    layer: int
    loss: float
    loglik: float
    sigma: float
    seconds: float


class TrainingHistory(BaseModel):
    """One record per epoch per GMM layer."""
    records: List[EpochRecord] = Field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    def for_layer(self, layer: int) -> List[EpochRecord]:
        return [r for r in self.records if r.layer == layer]

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "layer", "loss", "loglik", "sigma", "seconds"]
        return pd.DataFrame([r.model_dump() for r in self.records], columns=columns)
