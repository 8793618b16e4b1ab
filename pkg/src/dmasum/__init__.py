"""Dual mixture-of-attention video summarization with single-video meta
learning, in plain numpy."""

from .attention import bottleneck_trial, moa_maps, rank_diagnose
from .autodiff import ParameterVector, Tape, finite_diff_check
from .data import assemble_setting, kfold_splits, load_dataset, synth_dataset, write_features
from .errors import (DatasetLoadError, DmaSumError, DomainError, InputError, NumericError,
                     ShapeError, StateError, UndefinedCoefficientError)
from .evaluation import (correlation_curve, f1_keyshot, kendall_tau, knapsack_select,
                         kts_segment, rank_correlation_protocol, spearman_rho)
from .meta import MetaConfig, Trainer, VideoTask, meta_train, plain_train, train_epoch
from .model import DmaSumModel, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import SeededRng, numerical_rank

__version__ = "0.1.0"
