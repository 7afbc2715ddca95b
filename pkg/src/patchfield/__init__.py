"""Dense approximate nearest-neighbor fields over image patches.

Randomized patch correspondence (translation, rotation+scale, descriptors,
k-NN), collection-scale matching, and the patch-based applications built on
top: retargeting, completion, reshuffling, denoising, forgery detection,
lattice detection and template detection.
"""

from patchfield.core import (
    ColorSpace,
    ImageBuffer,
    InputError,
    PatchGeometry,
    Rect,
    build_pyramid,
    load_image,
    patch_distance,
    save_image,
    to_lab,
)

__version__ = "0.1.0"

__all__ = [
    "ColorSpace",
    "ImageBuffer",
    "InputError",
    "PatchGeometry",
    "Rect",
    "build_pyramid",
    "load_image",
    "patch_distance",
    "save_image",
    "to_lab",
    "__version__",
]
