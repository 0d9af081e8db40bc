"""Config-driven OCR inference and evaluation engine.

Detector post-processing, sequence decoding, key-information extraction and
ICDAR-style evaluation, with all neural forward passes isolated behind a
pluggable model backend so the whole pipeline runs without trained weights.
"""

from .backend import MockBackend, ModelSpec, OnnxBackend, map_coords, preprocess
from .decoding import (
    Dictionary,
    Transcription,
    attention_decode,
    ctc_beam_decode,
    ctc_greedy_decode,
    normalize_text,
)
from .detection import (
    DetParams,
    Detection,
    KernelStack,
    connected_components,
    db_postprocess,
    extract_contour,
    pan_aggregate,
    pan_postprocess,
    pse_expand,
    psenet_postprocess,
)
from .errors import (
    BackendError,
    BuildError,
    ConfigError,
    DecodeError,
    DictionaryError,
    GeometryError,
    OcrEngineError,
    ShapeError,
    WeightsError,
)
from .evaluation import (
    DetMetrics,
    GtInstance,
    det_metrics,
    e2e_metrics,
    match_detections,
    recog_metrics,
    render_report,
)
from .geometry import (
    Polygon,
    RotatedBox,
    convex_hull,
    min_area_rect,
    polygon_area,
    polygon_intersection_area,
    polygon_iou,
    polygon_offset,
)
from .kie import KieWeights, build_graph, extract_entities, kie_infer, load_weights, save_weights
from .pipeline import (
    DocumentResult,
    Pipeline,
    Registry,
    bench,
    build_pipeline,
    convert_dataset,
    crop_region,
    default_registry,
    load_config,
    render_overlay,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BuildError",
    "ConfigError",
    "DecodeError",
    "DetMetrics",
    "DetParams",
    "Detection",
    "Dictionary",
    "DictionaryError",
    "DocumentResult",
    "GeometryError",
    "GtInstance",
    "KernelStack",
    "KieWeights",
    "MockBackend",
    "ModelSpec",
    "OcrEngineError",
    "OnnxBackend",
    "Pipeline",
    "Polygon",
    "Registry",
    "RotatedBox",
    "ShapeError",
    "Transcription",
    "WeightsError",
    "attention_decode",
    "bench",
    "build_graph",
    "build_pipeline",
    "connected_components",
    "convert_dataset",
    "convex_hull",
    "crop_region",
    "ctc_beam_decode",
    "ctc_greedy_decode",
    "db_postprocess",
    "default_registry",
    "det_metrics",
    "e2e_metrics",
    "extract_contour",
    "extract_entities",
    "kie_infer",
    "load_config",
    "load_weights",
    "map_coords",
    "match_detections",
    "min_area_rect",
    "normalize_text",
    "pan_aggregate",
    "pan_postprocess",
    "polygon_area",
    "polygon_intersection_area",
    "polygon_iou",
    "polygon_offset",
    "preprocess",
    "pse_expand",
    "psenet_postprocess",
    "recog_metrics",
    "render_overlay",
    "render_report",
    "save_weights",
    "__version__",
]
