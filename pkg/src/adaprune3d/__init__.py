"""Input-adaptive activation pruning for 3D CNNs on CPU, in NumPy."""

from .aap import ControllerOutput, GateConfig, PruningPlan, build_plan
from .ava import AvaParams, ImportanceProfile, ava_forward, hoyer
from .complexity import ComplexityScore, complexity_scores, fit_flops_regression
from .data import Dataset, SyntheticDatasetSpec, load_dataset, write_dataset
from .errors import AdaPruneError, ConfigurationError, NumericalError, UsageError, ValidationError
from .models import Model, ModelConfig, forward_eval, load_checkpoint, save_checkpoint
from .pipeline import RunConfig, ablate, evaluate, train_aap, train_ava
from .sparse import flop_count_dense, flop_count_pruned, sparse_conv3d
from .tensor import ConvSpec, Tensor4D, conv3d_dense

__version__ = "0.1.0"

__all__ = [
    "AdaPruneError", "AvaParams", "ComplexityScore", "ConfigurationError", "ControllerOutput", "ConvSpec",
    "Dataset", "GateConfig", "ImportanceProfile", "Model", "ModelConfig", "NumericalError", "PruningPlan",
    "RunConfig", "SyntheticDatasetSpec", "Tensor4D", "UsageError", "ValidationError", "ablate",
    "ava_forward", "build_plan", "complexity_scores", "conv3d_dense", "evaluate", "fit_flops_regression",
    "flop_count_dense", "flop_count_pruned", "forward_eval", "hoyer", "load_checkpoint", "load_dataset",
    "save_checkpoint", "sparse_conv3d", "train_aap", "train_ava", "write_dataset",
]
