"""iterlace: iterative nested Laplace inference for latent Gaussian models.

The package fits latent Gaussian models whose predictor may be an
arbitrary (smooth) non-linear expression of the latent components, by
alternating linearisation of the predictor with a full nested-Laplace
pass and a line search on the linearisation point.
"""

__version__ = "0.1.0"

from .calibration import CalibrationError, SbcResult, sbc_run
from .config import (
    BuiltModel,
    ConfigError,
    ModelSpec,
    build_model,
    load_model,
    read_table,
    write_model,
)
from .diagnostics import (
    DiagnosticsError,
    KlReport,
    correction_matrix,
    kl_divergences,
    linearisation_deviation,
)
from .engine import (
    Component,
    EngineError,
    FitResult,
    IterationRecord,
    Model,
    ObsBlock,
    fit,
    generate,
)
from .exprs import ExprError, parse_expr
from .latents import (
    Ar1Model,
    BesagModel,
    BymModel,
    FixedEffectsModel,
    GaussianPrior,
    Graph,
    HyperParam,
    IidModel,
    LogGammaPrior,
    Rw1Model,
    read_graph,
)
from .likelihoods import GaussianFamily, LikelihoodError, PoissonFamily, make_family
from .mappers import (
    AggregateMapper,
    BlockSpec,
    CollectMapper,
    ConstMapper,
    ExponentialQuantile,
    FactorMapper,
    GammaQuantile,
    IndexMapper,
    LinearMapper,
    LogSumExpMapper,
    MapperError,
    MarginalMapper,
    MultiMapper,
    PipeMapper,
    ScaleMapper,
)
from .sparse import CholFactor, FactorizationError, SparseSym, chol, sparse_from_triplets

__all__ = [
    "Ar1Model",
    "AggregateMapper",
    "BesagModel",
    "BlockSpec",
    "BuiltModel",
    "BymModel",
    "CalibrationError",
    "CholFactor",
    "CollectMapper",
    "Component",
    "ConfigError",
    "ConstMapper",
    "DiagnosticsError",
    "EngineError",
    "ExponentialQuantile",
    "ExprError",
    "FactorMapper",
    "FactorizationError",
    "FitResult",
    "FixedEffectsModel",
    "GammaQuantile",
    "GaussianFamily",
    "GaussianPrior",
    "Graph",
    "HyperParam",
    "IidModel",
    "IndexMapper",
    "IterationRecord",
    "KlReport",
    "LikelihoodError",
    "LinearMapper",
    "LogGammaPrior",
    "LogSumExpMapper",
    "MapperError",
    "MarginalMapper",
    "Model",
    "ModelSpec",
    "MultiMapper",
    "ObsBlock",
    "PipeMapper",
    "PoissonFamily",
    "Rw1Model",
    "SbcResult",
    "ScaleMapper",
    "SparseSym",
    "build_model",
    "chol",
    "correction_matrix",
    "fit",
    "generate",
    "kl_divergences",
    "linearisation_deviation",
    "load_model",
    "make_family",
    "parse_expr",
    "read_graph",
    "read_table",
    "sbc_run",
    "sparse_from_triplets",
    "write_model",
    "__version__",
]
