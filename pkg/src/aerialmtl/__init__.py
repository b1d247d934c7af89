"""Joint height regression and semantic segmentation of aerial images.

A small numpy autodiff engine drives a U-shaped network whose encoder and
first decoder stages are shared between the two tasks, with equal, GradNorm,
MGDA or MGDA-UB loss balancing, Gaussian-blended tiled inference and
MC-dropout uncertainty.
"""

from .balancing import Balancer, GradNormState, TaskWeights, gradnorm_step, min_norm_2task
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, desk_config
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    DataError,
    DegenerateLossError,
    EmptyEvaluation,
    FormatError,
    InvalidArgument,
    MtlError,
    ShapeError,
    TrainingDiverged,
)
from .geodata import Raster, height_from_dsm_dem, read_raster, resample, synth_scene, write_raster
from .inference import GaussianWindow, mc_dropout_uncertainty, tiled_predict
from .metrics import ConfusionMatrix, aa, evaluate, kappa, oa, regression_metrics
from .model import ModelConfig, MtlModel, build_model
from .train import evaluate_model, load_model, train

__version__ = "0.1.0"
