from mergetrain.datasets.crops import (
    CropRecord,
    background_crops,
    crop_image,
    jittered_crops,
    load_crops,
    pixel_window,
    proxy_crops,
    save_crops,
)
from mergetrain.datasets.manifest import (
    SCHEMA,
    Annotation,
    DatasetManifest,
    ImageRecord,
    ManifestError,
    load_manifest,
    merge,
    missing_rate,
    save_manifest,
    split_and_strip,
)
from mergetrain.datasets.synth import ImageStore, SynthConfig, SynthError, draw_shape, relocate, synth_generate

__all__ = [
    "SCHEMA",
    "Annotation",
    "CropRecord",
    "DatasetManifest",
    "ImageRecord",
    "ImageStore",
    "ManifestError",
    "SynthConfig",
    "SynthError",
    "background_crops",
    "crop_image",
    "draw_shape",
    "jittered_crops",
    "load_crops",
    "load_manifest",
    "merge",
    "missing_rate",
    "pixel_window",
    "proxy_crops",
    "relocate",
    "save_crops",
    "save_manifest",
    "split_and_strip",
    "synth_generate",
]
