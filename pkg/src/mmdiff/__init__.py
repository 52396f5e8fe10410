"""Multimodal diffusion forecaster with decoupled guidance, built on a small numpy autodiff core."""

from .config import RunConfig, load_config
from .data import Report, SeriesFrame, SplitSpec, load_reports, load_series, prepare_dataset
from .diffusion import DiffusionConfig, NoiseSchedule, make_quadratic_schedule, sample
from .errors import CheckpointError, ConfigError, ContractError, InputError, MMDiffError, NonFiniteError, ShapeError
from .evaluation import VARIANTS, EvalReport, run_ablation
from .guidance import GuidanceWeights, apply_condition_dropout, combine
from .inference import forecast
from .metrics import mae, mse
from .model import Conditions, ForecastModel, ModelConfig
from .synthetic import SyntheticSpec, generate_synthetic
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
