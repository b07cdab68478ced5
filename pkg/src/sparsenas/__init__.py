"""sparsenas: differentiable architecture search with zeroth-order bi-level
optimization and annealed sparsemax operation mixing."""

__version__ = "0.1.0"

from .simplex import AnnealSchedule, annealed_sparsemax, softmax_tau, sparsemax
from .supernet import (Genotype, Mixing, OpKind, Supernet, SupernetConfig,
                       discretize, instantiate)
from .search import (Algorithm, SearchConfig, SearchTrace, retrain, search,
                     zo_hypergradient, exact_hypergradient_quadratic)
from .data import Dataset, BatchStream, load, save, synth_blobs
from .tensor import Tensor, backward, no_grad, tape

__all__ = [
    "AnnealSchedule", "annealed_sparsemax", "softmax_tau", "sparsemax",
    "Genotype", "Mixing", "OpKind", "Supernet", "SupernetConfig",
    "discretize", "instantiate",
    "Algorithm", "SearchConfig", "SearchTrace", "retrain", "search",
    "zo_hypergradient", "exact_hypergradient_quadratic",
    "Dataset", "BatchStream", "load", "save", "synth_blobs",
    "Tensor", "backward", "no_grad", "tape",
]
