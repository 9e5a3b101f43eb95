"""Geometry and attention core for turning a camera-free image into an 8-view panorama."""

from .caa import CaaTensors, caa_backward, caa_forward
from .geometry import (CameraParams, Homography, Intrinsics, canonical_params, homography_from_params,
                       homography_from_params_inverse, intrinsics_from_params, params_from_homography,
                       project_point, rotation_from_angles)
from .pano import (CorrespondenceMap, PanoLayout, build_correspondence, equirect_to_views,
                   gather_neighborhood, views_to_equirect)
from .raster import ImageRaster, WarpSpec, random_warp, sample_bilinear, warp_image

__version__ = "0.1.0"

__all__ = [
    "CaaTensors", "caa_backward", "caa_forward",
    "CameraParams", "Homography", "Intrinsics", "canonical_params", "homography_from_params",
    "homography_from_params_inverse", "intrinsics_from_params", "params_from_homography",
    "project_point", "rotation_from_angles",
    "CorrespondenceMap", "PanoLayout", "build_correspondence", "equirect_to_views",
    "gather_neighborhood", "views_to_equirect",
    "ImageRaster", "WarpSpec", "random_warp", "sample_bilinear", "warp_image",
]
