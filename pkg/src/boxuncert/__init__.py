"""Localization-uncertainty propagation, calibration, and evaluation."""

from .anchors import (
    Anchor,
    AnchorGridConfig,
    DecodedBox,
    GaussianBox4,
    Variant,
    build_anchor_grid,
    decode,
    decode_batch,
    encode,
    nll_loss,
    parse_variant,
    rescale,
)
from .calibration import (
    CalibrationModel,
    IsotonicMap,
    apply_calibration,
    calibrate_pairs,
    fit_factor,
    fit_isotonic,
    pava_fit,
)
from .dist import (
    Affine,
    Exp,
    Gaussian1,
    Moments1,
    Sigmoid,
    TransformChain,
    chain_forward,
    chain_log_density,
    propagate,
    propagate_closed_form,
    propagate_mc,
    propagate_quadrature,
)
from .errors import BoxUncertError, ConfigError, DomainError, FormatError, NoClosedFormError
from .matching import (
    Detection,
    GroundTruth,
    MatchedPair,
    MatchResult,
    iou,
    match_by_mse,
    split_by_iou_threshold,
)
from .metrics import (
    BinnedCorrelation,
    MetricReport,
    compute_report,
    correlate,
    coverage,
    ece,
    md_cd_uncertainty,
    sigma_obj,
)
from .synth import SynthConfig, SynthScenario, generate

__version__ = "0.1.0"
