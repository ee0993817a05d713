"""Probabilistic motion segmentation: marginal flow likelihoods under rigid
motion priors, direct mask fitting, a synthetic scene generator, and
segmentation metrics."""

from .core import (
    FlowField,
    HardMaskStack,
    Lattice,
    SoftMaskStack,
    harden,
    lattice,
    softmax_masks,
)
from .errors import (
    DivergenceError,
    EstimationFailedError,
    FlowsegError,
    FormatError,
    GenerationError,
    IllConditionedError,
    NumericalError,
    OracleCapacityError,
    RankDeficiencyError,
    UndefinedMetricError,
)
from .fit import FitConfig, FitReport, decode, fit_masks, fit_masks_restarts
from .likelihood import (
    RegionLikelihoodParts,
    RegionStats,
    affine_region_parts,
    nll,
    nll_affine,
    nll_affine_grad_masks,
    nll_grad_masks,
    nll_oracle,
    nll_simple_mean,
    nll_translation,
    nll_translation_grad_masks,
    nll_translation_preweight,
    region_stats,
)
from .metrics import (
    Assignment,
    ContingencyTable,
    fg_ari,
    hungarian,
    miou_hungarian,
    postprocess_connected_components,
)
from .motion import (
    MotionModelKind,
    MotionPrior,
    apply_motion,
    default_prior,
    estimate_prior_covariance,
    least_squares_theta,
    load_prior,
    model_flow,
    no_motion,
    save_prior,
)
from .objective import (
    GumbelRng,
    ObjectiveConfig,
    beta_at,
    derive_seed,
    gumbel_softmax_sample,
    kl_to_uniform,
    loss_beta,
    loss_grad,
    loss_value_and_grad,
)
from .simulator import (
    ObjectSpec,
    SceneSpec,
    SequenceRecord,
    add_flow_noise,
    generate_sequence,
    read_sequence,
    write_sequence,
)
from .warp import Frame, WarpPair, bilinear_sample, warp_by_flow, warp_loss

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "ContingencyTable",
    "DivergenceError",
    "EstimationFailedError",
    "FitConfig",
    "FitReport",
    "FlowField",
    "FlowsegError",
    "FormatError",
    "Frame",
    "GenerationError",
    "GumbelRng",
    "HardMaskStack",
    "IllConditionedError",
    "Lattice",
    "MotionModelKind",
    "MotionPrior",
    "NumericalError",
    "ObjectSpec",
    "ObjectiveConfig",
    "OracleCapacityError",
    "RankDeficiencyError",
    "RegionLikelihoodParts",
    "RegionStats",
    "SceneSpec",
    "SequenceRecord",
    "SoftMaskStack",
    "UndefinedMetricError",
    "WarpPair",
    "add_flow_noise",
    "affine_region_parts",
    "apply_motion",
    "beta_at",
    "bilinear_sample",
    "decode",
    "default_prior",
    "derive_seed",
    "estimate_prior_covariance",
    "fg_ari",
    "fit_masks",
    "fit_masks_restarts",
    "generate_sequence",
    "gumbel_softmax_sample",
    "harden",
    "hungarian",
    "kl_to_uniform",
    "lattice",
    "least_squares_theta",
    "load_prior",
    "loss_beta",
    "loss_grad",
    "loss_value_and_grad",
    "miou_hungarian",
    "model_flow",
    "nll",
    "nll_affine",
    "nll_affine_grad_masks",
    "nll_grad_masks",
    "nll_oracle",
    "nll_simple_mean",
    "nll_translation",
    "nll_translation_grad_masks",
    "nll_translation_preweight",
    "no_motion",
    "postprocess_connected_components",
    "read_sequence",
    "region_stats",
    "save_prior",
    "softmax_masks",
    "warp_by_flow",
    "warp_loss",
    "write_sequence",
]
