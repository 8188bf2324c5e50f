"""Densely nested top-down flow decoder for salient object detection, on a small numpy autograd."""
from .tensor import GraphError, MetaTensor, ShapeError, Tensor, backward, no_grad, precision, reset_graph, tracing

__version__ = "0.1.0"

__all__ = ["GraphError", "MetaTensor", "ShapeError", "Tensor", "backward", "no_grad", "precision",
           "reset_graph", "tracing", "__version__"]
