from .voxels import VoxelAsset, make_asset
from .render import Camera, render_ortho
from .pairs import ViewPair, build_pairs, build_perturbed_pairs
from .annotate import Annotation, annotate
from .dataset import Dataset, build_dataset

__all__ = [
    "VoxelAsset", "make_asset", "Camera", "render_ortho", "ViewPair", "build_pairs",
    "build_perturbed_pairs", "Annotation", "annotate", "Dataset", "build_dataset",
]
