"""Data-aware gradient compression: budgeted allocators, sparsifiers, and a
deterministic error-feedback distributed SGD simulator."""

from .alloc import (
    RatioAllocation,
    ThresholdAllocation,
    WeightVector,
    dagc_a,
    dagc_r,
    key_factor_absolute,
    phi,
)
from .compress import SparseUpdate, compress_with_feedback, hard_threshold, random_k, top_k
from .data import (
    LabeledDataset,
    Partition,
    dichotomous_weights,
    dirichlet_label_partition,
    load_idx,
    skewed_weights,
    synthetic_classification,
)
from .errors import BudgetInfeasibleError, ConfigError, DagcError, IdxFormatError
from .train import Model, RunMetrics, TrainConfig, evaluate, init_model, run_dsgd

__version__ = "0.1.0"
