"""Energy-based ConvNet models of images trained by multi-grid minimal contrastive divergence."""

from .langevin import LangevinConfig, run_chain, run_chain_masked, sample_multigrid
from .network import NetworkSpec, ParamSet, ReferenceDistribution, init_params, preset_spec, score
from .pyramid import build_pyramid, downscale, upscale
from .trainer import TrainConfig, TrainState, train

__all__ = [
    "LangevinConfig", "NetworkSpec", "ParamSet", "ReferenceDistribution", "TrainConfig", "TrainState",
    "build_pyramid", "downscale", "init_params", "preset_spec", "run_chain", "run_chain_masked",
    "sample_multigrid", "score", "train", "upscale",
]
