"""Circular-field-of-view endomicroscopy frame classification toolkit.

Two classifiers for carcinoma detection on circular-FOV microscopy
frames: patch probability fusion (``ppf``) and whole-image
classification with FOV-masked global average pooling plus class
activation maps. Ships with circular preprocessing, a small numpy
network engine, a seeded synthetic data generator, and a
leave-one-patient-out evaluation harness.
"""

__version__ = "0.1.0"

from .errors import (
    CleError,
    ConfigError,
    DataFormatError,
    ExperimentError,
    GeometryError,
    MetricsError,
    NonDiagnosticFrameError,
    NumericError,
)
from .frame import (
    Frame,
    ImageProbability,
    LABEL_CARCINOMA,
    LABEL_NORMAL,
    normalize_raw,
)
from .fov import (
    circular_extrapolate,
    compute_fov_mask,
    extract_patch_grid,
    extract_patches,
    frame_mask,
    median_histogram,
    median_raw_value,
)
from .data import Dataset, SynthSpec, generate_synthetic, load_manifest
from .patches import (
    PpfConfig,
    build_patch_net,
    classify_frame,
    classify_patches,
    fuse,
    load_ppf_model,
    save_ppf_model,
    train_ppf,
)
from .wholeimage import (
    WholeImageConfig,
    build_image_model,
    class_activation_map,
    classify_image,
    load_image_model,
    masked_gap,
    prepare_model_input,
    save_image_model,
    train_image,
)
from .harness import (
    EXPERIMENTS,
    ExperimentPlan,
    ResultVector,
    compute_metrics,
    execute_run,
    make_experiment_plan,
    make_lopo_plan,
    mann_whitney_auc,
    per_patient_report,
    roc_curve,
    run_experiment,
)

__all__ = [name for name in dir() if not name.startswith("_")]
