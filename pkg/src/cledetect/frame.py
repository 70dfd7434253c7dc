"""Frame record: one raw grayscale endomicroscopy image with its metadata.

Raw values are 16-bit scanner units. Only pixels inside the circular
field of view (see :mod:`cledetect.fov`) are diagnostic; values outside
the circle carry no meaning. Labels exist on image level only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Network-input scaling: a fixed gamma curve, NOT per-image standardization.
# Absolute brightness is diagnostic here (frame medians track fluorescence
# signal), so the transform must be monotone across the whole raw range;
# the square root compresses the wide dynamic range of bright sites so dim
# ones are not numerically invisible to the first conv layer.
RAW_GAMMA = 0.5
RAW_SCALE_DIVISOR = 64.0


def normalize_raw(values) -> np.ndarray:
    """Map raw scanner units to float32 network inputs, monotonically."""
    return np.sqrt(np.asarray(values, dtype=np.float32)) / RAW_SCALE_DIVISOR

LABEL_CARCINOMA = "carcinoma"
LABEL_NORMAL = "normal"
LABELS = (LABEL_NORMAL, LABEL_CARCINOMA)

# Carcinoma is the positive class everywhere; index 1 of every 2-class softmax.
CLASS_INDEX = {LABEL_NORMAL: 0, LABEL_CARCINOMA: 1}

SITE_ALVEOLAR_RIDGE = "alveolar_ridge"
SITE_HARD_PALATE = "hard_palate"
SITE_INNER_LABIUM = "inner_labium"
SITE_VOCAL_FOLD = "vocal_fold"
SITE_SYNTHETIC = "synthetic"
SITES = (
    SITE_ALVEOLAR_RIDGE,
    SITE_HARD_PALATE,
    SITE_INNER_LABIUM,
    SITE_VOCAL_FOLD,
    SITE_SYNTHETIC,
)


@dataclass(frozen=True)
class ImageProbability:
    """Frame-level carcinoma probability plus the method that produced it."""

    p_carcinoma: float
    method: str

    def __post_init__(self):
        if not 0.0 <= self.p_carcinoma <= 1.0:
            raise ValueError(f"probability out of range: {self.p_carcinoma}")

    @property
    def label(self) -> str:
        # ties go to the positive class: a 0.5 frame is flagged for review
        return LABEL_CARCINOMA if self.p_carcinoma >= 0.5 else LABEL_NORMAL


@dataclass
class Frame:
    """One raw frame plus the metadata the evaluation harness needs.

    ``raw`` is an (H, W) uint16 array. ``fov_radius`` is the radius of the
    valid circle in pixels, with the circle centered at (W/2, H/2).
    """

    frame_id: str
    raw: np.ndarray
    fov_radius: float
    patient_id: str
    sequence_id: str
    label: str
    site: str = SITE_SYNTHETIC
    domain: str = "synthetic-A"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.raw.ndim != 2:
            raise ValueError(f"frame {self.frame_id}: raw must be 2-D, got shape {self.raw.shape}")
        if self.raw.dtype != np.uint16:
            raise ValueError(f"frame {self.frame_id}: raw must be uint16, got {self.raw.dtype}")
        if self.label not in LABELS:
            raise ValueError(f"frame {self.frame_id}: unknown label {self.label!r}")

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]
