"""corrverify: dense pixel correspondence matching with geometric
verification (cyclic consistency + RANSAC homography) and the staged
similarity re-ranking it supports.

The package is organized as a numpy library:

* :mod:`corrverify.core` -- value types, bilinear sampling, file I/O
* :mod:`corrverify.pyramid` -- dense descriptor pyramid, hypercolumns,
  global descriptors
* :mod:`corrverify.matcher` -- coarse-to-fine dense correspondence maps
* :mod:`corrverify.verify` -- RANSAC + cyclic consistency + similarity scores
* :mod:`corrverify.rerank` -- index construction and staged re-ranking
* :mod:`corrverify.synth` -- synthetic warps, ground-truth maps, benchmarks
* :mod:`corrverify.metrics` -- AEPE / PCK / Recall@N
* :mod:`corrverify.cli` -- command-line entry points
"""

from .core import (
    CorrespondenceMap,
    FeatureMap,
    GlobalDescriptor,
    Image,
    InvalidSampleError,
    Mask,
    ParseError,
    bilinear_sample,
    identity_map,
    load_image,
    read_cmap,
    read_fmap,
    read_gdsc,
    resample_map,
    resize_image,
    save_image,
    to_grayscale,
    write_cmap,
    write_fmap,
    write_gdsc,
)

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceMap",
    "FeatureMap",
    "GlobalDescriptor",
    "Image",
    "InvalidSampleError",
    "Mask",
    "ParseError",
    "bilinear_sample",
    "identity_map",
    "load_image",
    "read_cmap",
    "read_fmap",
    "read_gdsc",
    "resample_map",
    "resize_image",
    "save_image",
    "to_grayscale",
    "write_cmap",
    "write_fmap",
    "write_gdsc",
    "__version__",
]
