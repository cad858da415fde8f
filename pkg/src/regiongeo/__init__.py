"""Region geometry for detectors that pool features from a shared convolutional map."""

from .boxes import Adjustment, Box, apply_adjustment, compute_adjustment, iou
from .receptive import CoordMap, LayerGeom, coord_map, feature_cells_in_region
from .spp import batch_pool, spatial_pool, spatial_pyramid_pool

__version__ = "0.1.0"
