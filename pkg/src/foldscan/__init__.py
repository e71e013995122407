"""Folded selective scans, fold-factor tuning and auxiliary-token swapping."""

from .tensor import get_precision, precision, set_precision
from .scan import ScanInputs, ScanOutputs, scan_backward, scan_parallel, scan_sequential
from .fold import (FoldPlan, FoldWarning, TuneLUT, closest_divisor, fold, lut_lookup, tune,
                   unfold)
from .layers import dwconv1d_folded
from .blocks import AuxState, StageSettings, aux_discard, aux_init, aux_swap
from .model import (LastPatchCueTask, Model, ModelConfig, SequenceClassifier, ToyConfig,
                    TrainingDiverged, build, erf_map, forward, loss_and_grads, train_toy)
from .bench import BenchRecord, run_bench

__version__ = "0.1.0"
