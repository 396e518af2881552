"""Compact CNN engine: fire-module backbone, weighted pooling heads,
early-exit cascade inference, weight quantization, and analytic cost
accounting, all on plain numpy arrays."""

from .architecture import (
    ExitBranch,
    FireSpec,
    HeadSpec,
    Network,
    NetworkSpec,
    Parameters,
    build_network,
    default_network_spec,
    fire_forward,
    gwap_forward,
    head_forward,
    init_parameters,
)
from .cascade import (
    CascadePolicy,
    CascadeResult,
    CascadeStats,
    cascade_eval,
    cascade_infer,
    head_eval,
)
from .cost import (
    CostReport,
    LayerCost,
    fire_cost,
    network_cost,
    reduction_ratio,
    standard_conv_cost,
)
from .data import (
    Sample,
    read_gnt,
    read_idx,
    stratified_split,
    synth_glyphs,
    write_idx,
)
from .errors import CcnnError
from .modelfile import ModelFile, load_model, save_model
from .ops import ConvParams
from .quantize import (
    QuantScheme,
    QuantizedTensor,
    dequantize,
    quantize_uniform,
    quantized_storage,
)
from .tape import GradientTape
from .training import (
    OptimizerState,
    TrainConfig,
    TrainStrategy,
    lr_on_plateau,
    sgd_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CcnnError",
    "CascadePolicy",
    "CascadeResult",
    "CascadeStats",
    "ConvParams",
    "CostReport",
    "ExitBranch",
    "FireSpec",
    "GradientTape",
    "HeadSpec",
    "LayerCost",
    "ModelFile",
    "Network",
    "NetworkSpec",
    "OptimizerState",
    "Parameters",
    "QuantScheme",
    "QuantizedTensor",
    "Sample",
    "TrainConfig",
    "TrainStrategy",
    "build_network",
    "cascade_eval",
    "cascade_infer",
    "default_network_spec",
    "dequantize",
    "fire_cost",
    "fire_forward",
    "gwap_forward",
    "head_eval",
    "head_forward",
    "init_parameters",
    "load_model",
    "lr_on_plateau",
    "network_cost",
    "quantize_uniform",
    "quantized_storage",
    "read_gnt",
    "read_idx",
    "reduction_ratio",
    "save_model",
    "sgd_step",
    "standard_conv_cost",
    "stratified_split",
    "synth_glyphs",
    "train",
    "write_idx",
]
