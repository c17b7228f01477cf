"""Desk-scale COVID-Net: a numpy autodiff core, the PEPX architecture with
long-range hub connections, a COVIDx-style data pipeline, training, metrics
and occlusion-based explanations."""
from . import arch, data, evaluation, explain, kernels, tensor, training
from ._jit import NUMBA_ENABLED
from .arch import ArchConfig, build_covidnet, complexity, count_macs, count_params, init_params, predict
from .evaluation import UNDEFINED, check_design_requirements, confusion, metrics
from .explain import AttributionConfig, critical_factors, overlay
from .tensor import Tape, Tensor, backward, grad_check
from .training import TrainConfig, train

__version__ = "0.1.0"
