"""Network adaptation toolkit: expand a trained seed network into a
weight-sharing super network, remap its parameters in, run
cost-regularized differentiable architecture search on the target task,
derive and re-remap, then finetune."""

from fna.tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
