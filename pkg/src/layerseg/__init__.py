"""Probabilistic ordered-boundary segmentation of layered images.

Gaussian patch appearance models + a global low-rank Gaussian shape prior
over all boundary heights, tied together by column-wise chain regularizers
and alternating variational inference that returns full posterior marginals
over the boundary positions.
"""

from .appearance import (
    AppearanceModel,
    AppearanceModelSet,
    ClassLabel,
    PatchProjector,
    extract_patch,
    fit_appearance,
    fit_appearance_set,
    fit_projector,
)
from .chain import DiscretePosterior, InfeasibleColumnError, optimize_qc
from .config import RunConfig, dump_config, load_config, parse_config_text
from .coupling import (
    GaussianPosterior,
    PrecisionAugment,
    PriorCoupling,
    build_augment,
    optimize_qb,
)
from .geometry import BoundaryField, GeometryError, Scan, ScanGeometry
from .glasso import graphical_lasso
from .inference import (
    BoundaryEstimate,
    Diagnostics,
    InferenceSettings,
    evaluate_objective,
    initialize,
    run_inference,
    segment,
)
from .lowrank import (
    ConvergenceError,
    DenseGaussian,
    LowRankGaussian,
    UnivariateGaussian,
    conditional,
    gaussian_product,
    neighbor_conditional,
    precision_solve,
    sample,
)
from .metrics import ErrorReport, aggregate_reports, cross_validate, unsigned_error
from .shape import ShapePrior, fit_ppca
from .synth import SynthConfig, generate, generate_dataset, parametric_prior
from .tables import build_data_tables, build_shape_tables, combine

__version__ = "0.1.0"
