from . import tensor
from .nn import EnsembleLinear, LayerNorm, Linear, ParameterSet
from .optim import AdamW
from .serialize import load_arrays, save_arrays
from .tensor import Tape, Tensor

__all__ = [
    "tensor",
    "Tensor",
    "Tape",
    "ParameterSet",
    "Linear",
    "EnsembleLinear",
    "LayerNorm",
    "AdamW",
    "save_arrays",
    "load_arrays",
]
