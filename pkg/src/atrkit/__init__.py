"""Adaptive automatic threat recognition toolkit for volumetric CT scans.

The pipeline: threshold + multi-scale morphological segmentation, an
intensity-histogram split, a calibrated linear material classifier, and an
adaptation layer that tunes probability offsets and density-range scaling
to hit a requested detection rate.
"""

__version__ = "1.0.0"

from .adaptation import (
    Detection,
    OffsetFunction,
    ThreatDefinition,
    ThreatEntry,
    adjust_probs,
    apply_ors,
    calibrate_offsets,
    scale_rho_range,
    select_alpha,
)
from .classify import (
    ClassifiedObject,
    FeatureConfig,
    MaterialModel,
    SynthSpec,
    TrainConfig,
    classify_objects,
    extract_feature,
    predict_proba,
    synth_others,
    train,
)
from .errors import (
    AtrError,
    ConfigError,
    ContractError,
    DomainError,
    EvaluationError,
    LabelNotFoundError,
    PlacementError,
    TrainingError,
    VolumeFormatError,
    VolumeShapeError,
)
from .evaluation import (
    GroundTruthObject,
    MatchReport,
    evaluate,
    match_one,
    pd_pfa_sweep,
)
from .morphology import OpeningParams, StructuringElement, dilate_constrained, opening_block
from .phantom import MaterialSpec, PhantomSpec, generate_bag, generate_dataset, load_dataset
from .segmentation import PeakParams, SegmentationConfig, detect_peaks, segment, shape_split
from .volume import (
    IntensityWindow,
    LabelVolume,
    ObjectStats,
    RawVolume,
    canonicalize,
    label_add,
    label_subtract,
    object_stats,
    read_volume,
    threshold_to_binary,
    write_volume,
)
