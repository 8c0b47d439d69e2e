from .canny import canny, edge_density
from .data import (
    DatasetManifest,
    ManifestError,
    ManifestRecord,
    TripletSample,
    build_manifest,
    prompt_dropout,
    synth_images,
    synth_style_corpus,
)
from .imageio import ImageFormatError, load_image, resize, save_image

__all__ = [
    "DatasetManifest",
    "ImageFormatError",
    "ManifestError",
    "ManifestRecord",
    "TripletSample",
    "build_manifest",
    "canny",
    "edge_density",
    "load_image",
    "prompt_dropout",
    "resize",
    "save_image",
    "synth_images",
    "synth_style_corpus",
]
