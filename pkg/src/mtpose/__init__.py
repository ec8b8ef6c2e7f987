"""mtpose: multi-task manifold deep learning for head-pose regression.

Two-stage pipeline: per-task CNN feature extraction, optional low-rank
manifold cleanup of the features, and a joint multi-task regularized
least-squares stage with trace/group-sparse/sparse+low-rank penalties.
"""

from .exceptions import (
    ConvergenceError,
    DataFormatError,
    MtposeError,
    NumericsError,
    ShapeError,
)
from .cnn import Activation, NetworkSpec, default_spec
from .harness import (
    EvalReport,
    PipelineConfig,
    Variant,
    ablate,
    compare_activations,
    compare_losses,
    run_pipeline,
    write_results_csv,
)
from .lrr import LrrProblem, LrrResult, lrr_affinity, mrcl_transform, solve_lrr
from .multitask import Penalty, SolverOpts, TaskDataset, predict, solve
from .prox import ShrinkAxis, l21_shrink, project_trace_ball, soft_threshold, svt
from .synth import SceneParams, generate_dataset, export_dataset, load_csv_dataset
from .estimators import ConvNetRegressor, ManifoldCleaner, MultiTaskRegressor

__version__ = "0.1.0"

__all__ = [
    "MtposeError",
    "ShapeError",
    "NumericsError",
    "ConvergenceError",
    "DataFormatError",
    "Activation",
    "NetworkSpec",
    "default_spec",
    "Penalty",
    "SolverOpts",
    "TaskDataset",
    "solve",
    "predict",
    "LrrProblem",
    "LrrResult",
    "solve_lrr",
    "mrcl_transform",
    "lrr_affinity",
    "ShrinkAxis",
    "soft_threshold",
    "l21_shrink",
    "svt",
    "project_trace_ball",
    "SceneParams",
    "generate_dataset",
    "export_dataset",
    "load_csv_dataset",
    "Variant",
    "PipelineConfig",
    "EvalReport",
    "run_pipeline",
    "compare_activations",
    "compare_losses",
    "ablate",
    "write_results_csv",
    "ConvNetRegressor",
    "ManifoldCleaner",
    "MultiTaskRegressor",
    "__version__",
]
