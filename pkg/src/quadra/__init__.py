"""quadra: a quadratic neural network library.

Dense float64 tensors with a reverse-mode tape, the quadratic neuron family
zoo with closed-form backward passes, a config auto-builder with RI-based
layer reduction, a hybrid-backprop trainer with cached-byte accounting, and
gradient/attention diagnostics.
"""

from . import autobuild, datasets, diagnostics, neurons, tensor, trainer
from .model import Model, load_checkpoint, save_checkpoint
from .tensor import Tensor, Tape

__version__ = "0.1.0"
