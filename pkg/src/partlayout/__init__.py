"""Part-level 3D layout toolkit: mesh segmentation into boxed parts, layout metrics,
layout refinement and a schedule-faithful sampler simulation."""

from .errors import PartLayoutError
from .mesh import TriMesh
from .metrics import Layout, obb_iou, part_iou
from .obb import Obb, min_obb
from .segmentation import ShapeRecord, run_pipeline

__all__ = ["PartLayoutError", "TriMesh", "Layout", "obb_iou", "part_iou", "Obb", "min_obb", "ShapeRecord", "run_pipeline"]
__version__ = "0.1.0"
