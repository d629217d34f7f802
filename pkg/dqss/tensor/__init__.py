from dqss.tensor.graph import Graph, LayerNode, forward
from dqss.tensor.tensor import Tensor, backward, default_dtype, no_grad, op_counter

__all__ = ["Graph", "LayerNode", "Tensor", "backward", "default_dtype", "forward", "no_grad", "op_counter"]
