"""Self-tuning inlier thresholds for RANSAC two-view geometry.

The threshold is tied to the inlier noise scale through
``tau = chi_quantile(alpha) * sigma`` and estimated jointly with the model.
"""

__version__ = "0.1.0"

from .distributions import (
    Probability,
    chi2_cdf,
    chi2_gof,
    chi2_pdf,
    chi2_quantile,
    chi2_sf,
    chi_quantile,
)
from .errors import (
    DegenerateConfigurationError,
    DomainError,
    EstimationError,
    InsufficientDataError,
    UndefinedResidualError,
)
from .formats import MatchFile, MatchPair, ResultRow, load_matches, save_matches
from .geometry import (
    CameraIntrinsics,
    EpipolarModel,
    MatchSet,
    ModelKind,
    RelativePose,
    decompose_essential,
    eight_point,
    pose_auc,
    pose_error,
    sampson_signed,
    sampson_sq,
    seven_point,
)
from .ransac import RansacConfig, RansacResult, msac, refit_on_inliers
from .scale import (
    ScaleConfig,
    ThresholdEstimate,
    median_sigma,
    online_mean_filter,
    simfit,
    simfitpp,
    simfitpp_multi,
    tau_corrected_sigma,
)
from .synthetic import SceneSpec, generate_scene, scene_suite, sweep_benchmark
