"""atlasfuse: multi-atlas label fusion for 3-d volumes.

Core containers and geometry live in :mod:`atlasfuse.volume`; submodules
cover file formats, similarity metrics, filter banks, the k-NN appearance
model, voting and STAPLE fusers, graph-cut fusion, patch-based fusion, the
end-to-end pipeline, and a synthetic phantom harness.
"""

from .volume import (
    AffineTransform,
    DisplacementField,
    Geometry,
    LabelMap,
    RegionOfInterest,
    Volume,
    crop,
    dice,
    dilate,
    embed,
    histogram_match,
    resample,
    signed_distance,
    transfer_labels_logodds,
    uncertainty_mask,
    union_support,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "DisplacementField",
    "Geometry",
    "LabelMap",
    "RegionOfInterest",
    "Volume",
    "crop",
    "dice",
    "dilate",
    "embed",
    "histogram_match",
    "resample",
    "signed_distance",
    "transfer_labels_logodds",
    "uncertainty_mask",
    "union_support",
    "__version__",
]
