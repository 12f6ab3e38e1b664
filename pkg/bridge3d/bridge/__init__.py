from .prompt import PromptSpec, sample_prompt
from .flow import cfm_interpolate, cfm_loss, euler_integrate, nearest_step
from .model import BridgeDims, BridgeModel
from .hidden import HiddenStateBundle, euler_sample, extract_hidden
from .train import load_bridge, train_bridge

__all__ = [
    "PromptSpec", "sample_prompt", "cfm_interpolate", "cfm_loss", "euler_integrate", "nearest_step",
    "BridgeDims", "BridgeModel", "HiddenStateBundle", "euler_sample", "extract_hidden",
    "load_bridge", "train_bridge",
]
