# analytics package
from .metrics import back_region_iou, chamfer, iou, occupancy_to_points, psnr

__all__ = ["back_region_iou", "chamfer", "iou", "occupancy_to_points", "psnr"]
