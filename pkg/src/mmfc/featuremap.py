from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITIES = ("camera", "lidar", "fused")


@dataclass
class FeatureMap:
    """A Q x D single-channel feature map tagged with its modality."""

    values: np.ndarray
    modality: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"feature map must be 2-D (Q, D), got shape {self.values.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map holds non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def nbytes_raw(self) -> int:
        """Size of the map stored as float32."""
        return 4 * self.values.size


def as_values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMap) else np.asarray(x)
