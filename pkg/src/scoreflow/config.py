"""Configuration records shared by the training and inference stages."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

# Reference settings of the original large-scale setup; kept as metadata only.
REFERENCE_DEFAULTS = {
    "latent_dim": 512,
    "iterations": 80000,
    "batch_size": 50,
    "learning_rate": 1e-3,
    "num_blocks": 4,
    "train_images": 10883,
    "eval_images": 19921,
}


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 16
    scheme: str = "rk4"
    tolerance: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"solver steps must be >= 1, got {self.steps}")
        if not self.tolerance > 0:
            raise ValueError(f"solver tolerance must be > 0, got {self.tolerance}")
        if self.scheme != "rk4":
            raise ValueError(f"unsupported solver scheme {self.scheme!r}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    reference_defaults: dict = field(default_factory=lambda: dict(REFERENCE_DEFAULTS), compare=False)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay constants must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "reference_defaults"}


def config_hash(obj) -> str:
    """Stable short hash of a JSON-able config (dataclass or mapping)."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
