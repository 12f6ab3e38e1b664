from .tensor import Tape, Tensor, backward, parameter
from .random import RandomStream, gaussian
from .optim import AdamState, adam_step
from .gradcheck import gradcheck
from .ops import layer_norm, matmul, sdp_attention, softmax_rows

__all__ = [
    "Tape", "Tensor", "backward", "parameter",
    "RandomStream", "gaussian",
    "AdamState", "adam_step",
    "gradcheck",
    "layer_norm", "matmul", "sdp_attention", "softmax_rows",
]
