"""Probability-map keypoint toolkit.

Keypoint localization as calibrated distributions over an activation
window: simplex-projected maps, a dense similarity-risk loss, mass-aware
decoding, presence probabilities, presence-aware evaluation, crop-based
dataset generation, and coverage calibration. Library plus ``pmapkit`` CLI;
no neural network required or included.
"""

from .calibration import (
    CoverageHistogram,
    ReliabilityCurve,
    TemperatureFit,
    coverage_histogram,
    fit_temperature,
    presence_reliability,
)
from .cropgen import CropSpec, ExtendedInstance, build_cropset, sample_crop, transform_instance
from .decoder import (
    DecodedKeypoint,
    DecodeMethod,
    argmax_decode,
    expected_oks_decode,
    fuse_double,
    udp_decode,
)
from .fitlab import FitConfig, FitReport, Normalizer, fit_map, mass_radius, sharpness_report
from .geometry import (
    ActivationWindow,
    ImageExtent,
    KeypointArea,
    Rect,
    WindowConfig,
    boundary_distance,
    classify_keypoint,
    domain_vector,
    window_from_bbox,
)
from .instances import KEYPOINT_NAMES, NUM_KEYPOINTS, PoseInstance
from .interop import (
    FormatError,
    GtDocument,
    PmapFile,
    PredictionDocument,
    parse_gt,
    parse_predictions,
    read_pmap,
    serialize_gt,
    serialize_predictions,
    write_pmap,
)
from .metrics import (
    ApCurve,
    DistanceCase,
    EvalReport,
    KeypointVerdict,
    SweepResult,
    evaluate_dataset,
    ex_oks_keypoint,
    match_dataset,
    mean_ap,
    pose_ex_oks,
    pose_oks,
    presence_sweep,
)
from .oks import (
    COCO_KAPPAS,
    LossConfig,
    OksParams,
    dense_oks_loss,
    dense_oks_loss_grad,
    expected_oks_map,
    load_kappa_table,
    oks_kernel,
    oks_similarity,
)
from .probmap import (
    PresenceProbability,
    ProbabilityMap,
    coverage_of_point,
    sparsemax,
    sparsemax_jvp,
    temperature_scale,
)

__version__ = "0.1.0"
