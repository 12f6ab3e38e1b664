from .layers import FusedBlock, InjectionAdapter, LoRAAdapter, ZeroLinear, attach_lora, lora_apply, project_hidden
from .voxel_latent import devoxelize, downsample_to, voxelize
from .stage import GenStage, StageDims, stage_forward
from .train import Generator3D, build_feature_cache, load_generator, loss_3d, train_3d
from .generate import generate_3d

__all__ = [
    "FusedBlock", "InjectionAdapter", "LoRAAdapter", "ZeroLinear", "attach_lora", "lora_apply", "project_hidden",
    "devoxelize", "downsample_to", "voxelize", "GenStage", "StageDims", "stage_forward",
    "Generator3D", "build_feature_cache", "load_generator", "loss_3d", "train_3d", "generate_3d",
]
