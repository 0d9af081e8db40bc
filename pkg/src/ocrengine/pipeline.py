"""Config-driven assembly and execution of detector -> recognizer -> KIE
chains, plus dataset conversion, overlay rendering and benchmarking.

A pipeline is described by a strict JSON document (unknown keys are build
errors naming the offending key path), assembled fail-fast (models, symbol
dictionaries and KIE weights are loaded and validated before any image is
touched) and executed deterministically: identical config and inputs give
byte-identical result files regardless of worker count.
"""

from __future__ import annotations

import glob as globmod
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from . import backend as backend_mod
from .backend import load_backend, map_coords, preprocess
from .decoding import Dictionary, Transcription, attention_decode, ctc_beam_decode, ctc_greedy_decode
from .detection import DetParams, Detection, KernelStack, db_postprocess, pan_postprocess, psenet_postprocess
from .errors import BackendError, BuildError, ConfigError, OcrEngineError
from .evaluation import parse_icdar_line, write_jsonl
from .geometry import Polygon, min_area_rect
from .kie import build_graph, extract_entities, kie_infer, load_weights

CONFIG_VERSION = 1

# Deterministic overlay palette, indexed by KIE class (RGB).
_PALETTE = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (0, 128, 128), (170, 110, 40),
)
_DEFAULT_COLOR = (255, 215, 0)


# ---------------------------------------------------------------------------
# Configuration


def _check_keys(doc: dict, allowed: set[str], required: set[str], path: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in doc:
            raise ConfigError(f"{path}.{key}: missing required key")


@dataclass(frozen=True)
class DetectorConfig:
    algorithm: str
    params: DetParams
    model: dict


@dataclass(frozen=True)
class RecognizerConfig:
    decoder: str
    dict_path: str
    model: dict
    beam_width: int = 5
    max_len: int = 40


@dataclass(frozen=True)
class KieStageConfig:
    weights_path: str
    class_names: tuple[str, ...]
    algorithm: str = "sdmgr"
    background_class: str | None = None


@dataclass(frozen=True)
class IoConfig:
    input: str | None = None
    output: str | None = None
    overlay: bool = False
    overlay_dir: str | None = None


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    version: int
    detector: DetectorConfig | None
    recognizer: RecognizerConfig | None
    kie: KieStageConfig | None
    io: IoConfig
    runtime: RuntimeConfig


def parse_config(doc: dict, registry: "Registry | None" = None) -> PipelineConfig:
    """Validate a config document, fill defaults and resolve algorithm names
    against the registry.  Every failure names the offending key path."""
    registry = registry or default_registry()
    _check_keys(doc, {"version", "stages", "io", "runtime"}, {"version", "stages"}, "config")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"config.version: expected {CONFIG_VERSION}, got {doc['version']!r}")
    stages = doc["stages"]
    _check_keys(stages, {"detector", "recognizer", "kie"}, set(), "config.stages")
    if not stages:
        raise ConfigError("config.stages: at least one stage is required")

    detector = None
    if "detector" in stages:
        det = stages["detector"]
        _check_keys(det, {"algorithm", "params", "model"}, {"algorithm", "model"}, "config.stages.detector")
        if det["algorithm"] not in registry.names("detector"):
            raise ConfigError(
                f"config.stages.detector.algorithm: unknown algorithm {det['algorithm']!r} "
                f"(have: {', '.join(registry.names('detector'))})"
            )
        params_doc = det.get("params", {})
        _check_keys(
            params_doc,
            {"bin_thresh", "box_score_thresh", "unclip_ratio", "min_kernel_area", "max_candidates", "pan_dist_thresh"},
            set(),
            "config.stages.detector.params",
        )
        try:
            params = DetParams(**params_doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.stages.detector.params: {exc}") from exc
        detector = DetectorConfig(algorithm=det["algorithm"], params=params, model=det["model"])

    recognizer = None
    if "recognizer" in stages:
        rec = stages["recognizer"]
        _check_keys(
            rec,
            {"decoder", "dict", "model", "beam_width", "max_len"},
            {"decoder", "dict", "model"},
            "config.stages.recognizer",
        )
        if rec["decoder"] not in registry.names("decoder"):
            raise ConfigError(
                f"config.stages.recognizer.decoder: unknown decoder {rec['decoder']!r} "
                f"(have: {', '.join(registry.names('decoder'))})"
            )
        recognizer = RecognizerConfig(
            decoder=rec["decoder"],
            dict_path=rec["dict"],
            model=rec["model"],
            beam_width=int(rec.get("beam_width", 5)),
            max_len=int(rec.get("max_len", 40)),
        )

    kie = None
    if "kie" in stages:
        k = stages["kie"]
        _check_keys(
            k,
            {"algorithm", "weights", "class_names", "background_class"},
            {"weights", "class_names"},
            "config.stages.kie",
        )
        algorithm = k.get("algorithm", "sdmgr")
        if algorithm not in registry.names("kie"):
            raise ConfigError(f"config.stages.kie.algorithm: unknown algorithm {algorithm!r}")
        kie = KieStageConfig(
            weights_path=k["weights"],
            class_names=tuple(k["class_names"]),
            algorithm=algorithm,
            background_class=k.get("background_class"),
        )

    if kie is not None and recognizer is None:
        raise ConfigError("config.stages.kie: requires a recognizer stage (KIE consumes transcriptions)")

    io_doc = doc.get("io", {})
    _check_keys(io_doc, {"input", "output", "overlay", "overlay_dir"}, set(), "config.io")
    io = IoConfig(
        input=io_doc.get("input"),
        output=io_doc.get("output"),
        overlay=bool(io_doc.get("overlay", False)),
        overlay_dir=io_doc.get("overlay_dir"),
    )
    rt_doc = doc.get("runtime", {})
    _check_keys(rt_doc, {"workers", "seed"}, set(), "config.runtime")
    runtime = RuntimeConfig(workers=int(rt_doc.get("workers", 1)), seed=int(rt_doc.get("seed", 0)))
    if runtime.workers < 1:
        raise ConfigError(f"config.runtime.workers: must be >= 1, got {runtime.workers}")
    return PipelineConfig(
        version=doc["version"], detector=detector, recognizer=recognizer, kie=kie, io=io, runtime=runtime
    )


def load_config(path, registry: "Registry | None" = None) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, registry)


# ---------------------------------------------------------------------------
# Stage registry


class Registry:
    """Name -> constructor tables for detectors, decoders and KIE stages.
    Unknown names fail at build time, never at run time."""

    KINDS = ("detector", "decoder", "kie")

    def __init__(self):
        self._entries: dict[str, dict[str, object]] = {kind: {} for kind in self.KINDS}

    def register(self, kind: str, name: str, ctor) -> None:
        if kind not in self._entries:
            raise ConfigError(f"unknown registry kind {kind!r}")
        if name in self._entries[kind]:
            raise ConfigError(f"duplicate {kind} name {name!r}")
        self._entries[kind][name] = ctor

    def lookup(self, kind: str, name: str):
        try:
            return self._entries[kind][name]
        except KeyError:
            raise BuildError(
                f"no {kind} named {name!r} (have: {', '.join(self.names(kind))})"
            ) from None

    def names(self, kind: str) -> tuple[str, ...]:
        return tuple(self._entries[kind])


def _squeeze_map(arr: NDArray, name: str) -> NDArray:
    out = np.squeeze(np.asarray(arr))
    if out.ndim != 2:
        raise BackendError(f"output {name!r} is not a 2D map (shape {np.asarray(arr).shape})")
    return out


def _squeeze_stack(arr: NDArray, name: str) -> NDArray:
    out = np.asarray(arr)
    if out.ndim == 4 and out.shape[0] == 1:
        out = out[0]
    if out.ndim == 2:
        out = out[None]
    if out.ndim != 3:
        raise BackendError(f"output {name!r} is not a kernel stack (shape {np.asarray(arr).shape})")
    return out


def _squeeze_similarity(arr: NDArray, map_shape: tuple[int, int], name: str) -> NDArray:
    out = np.asarray(arr)
    if out.ndim == 4 and out.shape[0] == 1:
        out = out[0]
    if out.ndim != 3:
        raise BackendError(f"output {name!r} is not a similarity volume (shape {np.asarray(arr).shape})")
    if out.shape[:2] == map_shape:
        return out
    if out.shape[1:] == map_shape:
        return np.transpose(out, (1, 2, 0))
    raise BackendError(f"output {name!r} shape {out.shape} does not match map shape {map_shape}")


class DetectorStage:
    """Shared adapter: pull role-tagged maps out of backend outputs and run
    one of the post-processing algorithms."""

    required_roles: frozenset[str] = frozenset({"prob_map"})

    def __init__(self, model, params: DetParams):
        self.model = model
        self.params = params
        missing = self.required_roles - model.spec.roles
        if missing:
            raise BuildError(
                f"{type(self).__name__} needs output roles {sorted(missing)} "
                f"missing from the model spec (has {sorted(model.spec.roles)})"
            )

    def _prob(self, outputs: dict) -> NDArray:
        name = self.model.spec.output_for_role("prob_map")
        return backend_mod.to_probability_map(_squeeze_map(outputs[name], name), self.model.spec.scores)

    def _kernels(self, outputs: dict) -> NDArray:
        name = self.model.spec.output_for_role("kernel_stack")
        stack = _squeeze_stack(outputs[name], name)
        return backend_mod.to_probability_map(stack, self.model.spec.scores)

    def detect(self, outputs: dict) -> list[Detection]:
        raise NotImplementedError


class DbDetector(DetectorStage):
    required_roles = frozenset({"prob_map"})

    def detect(self, outputs: dict) -> list[Detection]:
        return db_postprocess(self._prob(outputs), self.params)


class PseNetDetector(DetectorStage):
    required_roles = frozenset({"prob_map", "kernel_stack"})

    def detect(self, outputs: dict) -> list[Detection]:
        prob = self._prob(outputs)
        kernels = self._kernels(outputs) > self.params.bin_thresh
        stack = KernelStack([kernels[i] for i in range(kernels.shape[0])])
        return psenet_postprocess(stack, prob, self.params)


class PanDetector(DetectorStage):
    required_roles = frozenset({"prob_map", "kernel_stack", "similarity"})

    def detect(self, outputs: dict) -> list[Detection]:
        prob = self._prob(outputs)
        kernels = self._kernels(outputs) > self.params.bin_thresh
        sim_name = self.model.spec.output_for_role("similarity")
        similarity = _squeeze_similarity(outputs[sim_name], prob.shape, sim_name)
        text_map = prob > self.params.bin_thresh
        return pan_postprocess(text_map, kernels[0], similarity, prob, self.params)


class RecognizerStage:
    """Backend forward plus one of the decoders."""

    dictionary_kind = "ctc"

    def __init__(self, model, dictionary: Dictionary, config: RecognizerConfig):
        self.model = model
        self.dictionary = dictionary
        self.config = config
        if "logits" not in model.spec.roles:
            raise BuildError("recognizer model spec lacks a 'logits' output role")

    def scores_from(self, outputs: dict) -> NDArray:
        name = self.model.spec.output_for_role("logits")
        arr = np.asarray(outputs[name])
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise BackendError(f"output {name!r} is not a (T, C) score sequence (shape {arr.shape})")
        return backend_mod.to_decoder_scores(arr, self.model.spec.scores)

    def decode(self, scores: NDArray) -> Transcription:
        raise NotImplementedError


class CtcGreedyRecognizer(RecognizerStage):
    def decode(self, scores: NDArray) -> Transcription:
        return ctc_greedy_decode(scores, self.dictionary)


class CtcBeamRecognizer(RecognizerStage):
    def decode(self, scores: NDArray) -> Transcription:
        hyps = ctc_beam_decode(scores, self.dictionary, self.config.beam_width)
        return hyps[0]


class AttentionRecognizer(RecognizerStage):
    """Drives the generic attention loop from a precomputed (T, C) score
    sequence: step t returns row t, then an end-token row once exhausted."""

    dictionary_kind = "attention"

    def decode(self, scores: NDArray) -> Transcription:
        end_row = np.full(scores.shape[1], -1e9)
        end_row[self.dictionary.end] = 0.0

        def step(state, _prev):
            t = 0 if state is None else state
            row = scores[t] if t < scores.shape[0] else end_row
            return t + 1, row

        return attention_decode(step, self.dictionary, self.config.max_len)


class SdmgrStage:
    """Graph construction + message-passing classification over recognized
    instances."""

    def __init__(self, weights, class_names: tuple[str, ...], background_class: str | None,
                 dictionary: Dictionary):
        self.weights = weights
        self.class_names = list(class_names)
        self.background_class = background_class
        self.dictionary = dictionary
        if weights.num_classes != len(self.class_names):
            raise BuildError(
                f"KIE weights classify {weights.num_classes} classes but config names "
                f"{len(self.class_names)}"
            )
        if weights.vocab_size < dictionary.size:
            raise BuildError(
                f"KIE embedding table covers {weights.vocab_size} symbols but the "
                f"dictionary can emit index {dictionary.size - 1}"
            )

    def extract(self, instances: list[tuple[Polygon, str]]) -> tuple[dict[str, list[str]], list[str]]:
        """Returns (entities, per-instance class names, aligned with input)."""
        if not instances:
            return {}, []
        nodes, edges = build_graph(instances, self.dictionary)
        scores = kie_infer(nodes, edges, self.weights)
        classes = [self.class_names[int(np.argmax(scores[i]))] for i in range(len(nodes))]
        entities = extract_entities(nodes, scores, self.class_names, self.background_class)
        return entities, classes


def default_registry() -> Registry:
    reg = Registry()
    reg.register("detector", "db", DbDetector)
    reg.register("detector", "psenet", PseNetDetector)
    reg.register("detector", "pan", PanDetector)
    reg.register("decoder", "ctc_greedy", CtcGreedyRecognizer)
    reg.register("decoder", "ctc_beam", CtcBeamRecognizer)
    reg.register("decoder", "attention", AttentionRecognizer)
    reg.register("kie", "sdmgr", SdmgrStage)
    return reg


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class DocumentResult:
    """Per-image outcome; transcription i belongs to detection i."""

    image_id: str
    detections: list[Detection] = field(default_factory=list)
    transcriptions: list[Transcription] = field(default_factory=list)
    entities: dict[str, list[str]] | None = None
    kie_classes: list[str] | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def to_record(self) -> dict:
        """Stable-key-order JSONL record (timings stay out: they vary run to
        run and the result file must be byte-identical across runs)."""
        record: dict = {"image_id": self.image_id}
        if self.error is not None:
            record["error"] = self.error
            return record
        dets = []
        for i in range(max(len(self.detections), len(self.transcriptions))):
            entry = {}
            if i < len(self.detections):
                det = self.detections[i]
                entry["polygon"] = [
                    [round(float(x), 2), round(float(y), 2)] for x, y in det.polygon.vertices
                ]
                entry["score"] = round(float(det.score), 4)
            if i < len(self.transcriptions):
                entry["text"] = self.transcriptions[i].text
                entry["text_score"] = round(float(self.transcriptions[i].score), 4)
            if self.kie_classes is not None and i < len(self.kie_classes):
                entry["kie_class"] = self.kie_classes[i]
            dets.append(entry)
        record["detections"] = dets
        if self.entities is not None:
            record["entities"] = self.entities
        return record


class Pipeline:
    """Assembled, immutable stage chain.  Use build_pipeline to construct."""

    def __init__(self, config: PipelineConfig, detector: DetectorStage | None,
                 recognizer: RecognizerStage | None, kie: SdmgrStage | None):
        self.config = config
        self.detector = detector
        self.recognizer = recognizer
        self.kie = kie

    # -- single image ------------------------------------------------------

    def _detect(self, image: NDArray) -> list[Detection]:
        assert self.detector is not None
        tensor, record = preprocess(image, self.detector.model.spec)
        outputs = self.detector.model.forward(tensor)
        detections = self.detector.detect(outputs)
        return map_coords(detections, record)

    def _recognize_crop(self, crop: NDArray) -> Transcription:
        assert self.recognizer is not None
        tensor, _ = preprocess(crop, self.recognizer.model.spec)
        outputs = self.recognizer.model.forward(tensor)
        return self.recognizer.decode(self.recognizer.scores_from(outputs))

    def run_document(self, image: NDArray, image_id: str) -> DocumentResult:
        result = DocumentResult(image_id=image_id)
        t0 = time.perf_counter()
        if self.detector is not None:
            result.detections = self._detect(image)
            result.timings_ms["detect"] = (time.perf_counter() - t0) * 1000.0
        if self.recognizer is not None:
            t1 = time.perf_counter()
            if self.detector is not None:
                for det in result.detections:
                    crop = crop_region(image, det.polygon)
                    result.transcriptions.append(self._recognize_crop(crop))
            else:
                # No detector: the input image itself is the crop.
                result.transcriptions.append(self._recognize_crop(image))
            result.timings_ms["recognize"] = (time.perf_counter() - t1) * 1000.0
        if self.kie is not None:
            t2 = time.perf_counter()
            instances = [
                (det.polygon, tr.text)
                for det, tr in zip(result.detections, result.transcriptions)
            ]
            # Reading order (top-to-bottom, left-to-right by box center) for
            # the graph; recover per-detection classes through the index map.
            def center(poly: Polygon) -> tuple[float, float]:
                x0, y0, x1, y1 = poly.bounds()
                return ((y0 + y1) / 2.0, (x0 + x1) / 2.0)

            order = sorted(range(len(instances)), key=lambda i: center(instances[i][0]))
            entities, classes_sorted = self.kie.extract([instances[i] for i in order])
            result.entities = entities
            classes = [""] * len(instances)
            for pos, i in enumerate(order):
                classes[i] = classes_sorted[pos]
            result.kie_classes = classes
            result.timings_ms["kie"] = (time.perf_counter() - t2) * 1000.0
        result.timings_ms["total"] = (time.perf_counter() - t0) * 1000.0
        return result

    def run_path(self, path: str) -> DocumentResult:
        image_id = Path(path).stem
        try:
            image = load_image(path)
            return self.run_document(image, image_id)
        except Exception as exc:  # per-image isolation: record and continue
            return DocumentResult(image_id=image_id, error=f"{type(exc).__name__}: {exc}")

    # -- batch --------------------------------------------------------------

    def run(self, inputs: list[str], workers: int | None = None) -> list[DocumentResult]:
        """Process images in input order; failures are recorded per image and
        never abort the batch.  Output order and content are independent of
        the worker count."""
        workers = workers or self.config.runtime.workers
        if workers <= 1 or len(inputs) <= 1:
            return [self.run_path(p) for p in inputs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.run_path, inputs))


def build_pipeline(config: PipelineConfig, registry: Registry | None = None) -> Pipeline:
    """Load every model, dictionary and weight file declared by the config;
    any inconsistency raises before an image is touched."""
    registry = registry or default_registry()
    detector = recognizer = kie_stage = None
    if config.detector is not None:
        ctor = registry.lookup("detector", config.detector.algorithm)
        try:
            model = load_backend(config.detector.model)
        except OcrEngineError as exc:
            raise BuildError(f"detector model: {exc}") from exc
        detector = ctor(model, config.detector.params)
    if config.recognizer is not None:
        ctor = registry.lookup("decoder", config.recognizer.decoder)
        try:
            model = load_backend(config.recognizer.model)
        except OcrEngineError as exc:
            raise BuildError(f"recognizer model: {exc}") from exc
        kind = getattr(ctor, "dictionary_kind", "ctc")
        try:
            dictionary = Dictionary.load(config.recognizer.dict_path, kind=kind)
        except FileNotFoundError as exc:
            raise BuildError(f"dictionary file not found: {config.recognizer.dict_path}") from exc
        except OcrEngineError as exc:
            raise BuildError(f"dictionary: {exc}") from exc
        recognizer = ctor(model, dictionary, config.recognizer)
    if config.kie is not None:
        assert recognizer is not None  # enforced by parse_config
        try:
            weights = load_weights(config.kie.weights_path)
        except FileNotFoundError as exc:
            raise BuildError(f"KIE weight file not found: {config.kie.weights_path}") from exc
        except OcrEngineError as exc:
            raise BuildError(f"KIE weights: {exc}") from exc
        ctor = registry.lookup("kie", config.kie.algorithm)
        kie_stage = ctor(weights, config.kie.class_names, config.kie.background_class,
                         recognizer.dictionary)
    if detector is None and recognizer is None:
        raise BuildError("pipeline has no stages")
    return Pipeline(config, detector, recognizer, kie_stage)


# ---------------------------------------------------------------------------
# Image helpers


def load_image(path) -> NDArray[np.uint8]:
    """Decode PNG/JPEG/BMP to an (H, W) or (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img)


def crop_region(image: NDArray, polygon) -> NDArray:
    """Rectify the polygon's minimum-area rectangle to an axis-aligned patch
    (bilinear sampling, clamped at image borders); the patch is rotated so
    width >= height.  Output size is the rectangle size rounded to >= 1 px.

    ``polygon`` may be a Polygon or a raw vertex sequence; degenerate
    (collinear) regions raise GeometryError."""
    verts = polygon.vertices if isinstance(polygon, Polygon) else polygon
    rect = min_area_rect(verts)
    width, height, angle = rect.width, rect.height, rect.angle
    if height > width:
        width, height = height, width
        angle += math.pi / 2.0
    out_w = max(1, round(width))
    out_h = max(1, round(height))
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = (np.arange(out_w) + 0.5) * (width / out_w) - width / 2.0
    v = (np.arange(out_h) + 0.5) * (height / out_h) - height / 2.0
    uu, vv = np.meshgrid(u, v)
    src_x = rect.cx + uu * cos_a - vv * sin_a
    src_y = rect.cy + uu * sin_a + vv * cos_a
    return _bilinear_sample(image, src_x, src_y)


def _bilinear_sample(image: NDArray, xs: NDArray, ys: NDArray) -> NDArray:
    arr = np.asarray(image)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x0 = np.clip(x0.astype(int), 0, w - 1)
    y0 = np.clip(y0.astype(int), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    vals = (
        arr[y0, x0] * (1 - fx) * (1 - fy)
        + arr[y0, x1] * fx * (1 - fy)
        + arr[y1, x0] * (1 - fx) * fy
        + arr[y1, x1] * fx * fy
    )
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        vals = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    if squeeze:
        vals = vals[:, :, 0]
    return vals


# ---------------------------------------------------------------------------
# Dataset conversion


def convert_dataset(format: str, src, dst) -> int:
    """Convert annotations to the unified JSONL layout; returns the number of
    images converted.  Supported: "icdar_txt" (one gt_<id>.txt per image)."""
    if format != "icdar_txt":
        raise ConfigError(f"unknown dataset format {format!r} (supported: icdar_txt)")
    src_dir = Path(src)
    if not src_dir.is_dir():
        raise ConfigError(f"dataset source {src} is not a directory")
    files = sorted(src_dir.glob("*.txt"))
    if not files:
        raise ConfigError(f"no .txt annotation files under {src}")
    records = []
    for path in files:
        image_id = path.stem
        if image_id.startswith("gt_"):
            image_id = image_id[3:]
        instances = []
        text = path.read_text(encoding="utf-8-sig")
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.strip("\r")
            if not line.strip():
                continue
            gt = parse_icdar_line(line, str(path), lineno)
            instances.append(
                {
                    "polygon": [[float(x), float(y)] for x, y in gt.polygon.vertices],
                    "text": gt.transcription,
                    "ignore": gt.ignore,
                }
            )
        records.append({"image_id": image_id, "instances": instances})
    write_jsonl(dst, records)
    return len(records)


# ---------------------------------------------------------------------------
# Overlay rendering


def _class_color(result: DocumentResult, index: int) -> tuple[int, int, int]:
    if result.kie_classes is None:
        return _DEFAULT_COLOR
    # Deterministic: color indexed by the class's position in sorted order.
    names = sorted(set(result.kie_classes))
    return _PALETTE[names.index(result.kie_classes[index]) % len(_PALETTE)]


def render_overlay(image: NDArray, result: DocumentResult, out_path) -> None:
    """Write the detections drawn over the image; .svg gets a vector file,
    anything else a PNG.  No detections leaves the image unmodified."""
    out_path = Path(out_path)
    if out_path.suffix.lower() == ".svg":
        out_path.write_text(_overlay_svg(image, result), encoding="utf-8")
        return
    img = Image.fromarray(np.asarray(image)).convert("RGB")
    if result.detections:
        from PIL import ImageDraw

        draw = ImageDraw.Draw(img)
        for i, det in enumerate(result.detections):
            color = _class_color(result, i)
            pts = [tuple(v) for v in det.polygon.vertices]
            draw.polygon(pts, outline=color)
            label = _overlay_label(result, i)
            if label:
                x0, y0, _, _ = det.polygon.bounds()
                draw.text((x0, max(0.0, y0 - 10)), label, fill=color)
    img.save(out_path, format="PNG")


def _overlay_label(result: DocumentResult, index: int) -> str:
    parts = []
    if index < len(result.transcriptions):
        parts.append(result.transcriptions[index].text)
    if result.kie_classes is not None:
        parts.append(f"[{result.kie_classes[index]}]")
    return " ".join(p for p in parts if p)


def _overlay_svg(image: NDArray, result: DocumentResult) -> str:
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">'
    ]
    for i, det in enumerate(result.detections):
        r, g, b = _class_color(result, i)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in det.polygon.vertices)
        parts.append(
            f'<polygon points="{pts}" fill="none" stroke="rgb({r},{g},{b})" stroke-width="1"/>'
        )
        label = _overlay_label(result, i)
        if label:
            x0, y0, _, _ = det.polygon.bounds()
            from xml.sax.saxutils import escape

            parts.append(
                f'<text x="{x0:.2f}" y="{max(0.0, y0 - 2):.2f}" font-size="8" '
                f'fill="rgb({r},{g},{b})">{escape(label)}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Benchmarking


@dataclass(frozen=True)
class BenchReport:
    stage_median_ms: dict[str, float]
    stage_p90_ms: dict[str, float]
    images_per_sec: float
    images: int
    repeats: int

    def to_text(self) -> str:
        lines = [f"{'stage':<12} {'median_ms':>10} {'p90_ms':>10}"]
        for stage in self.stage_median_ms:
            lines.append(
                f"{stage:<12} {self.stage_median_ms[stage]:>10.3f} {self.stage_p90_ms[stage]:>10.3f}"
            )
        lines.append(f"throughput: {self.images_per_sec:.2f} images/sec "
                     f"({self.images} images x {self.repeats} repeats, warm-up excluded)")
        return "\n".join(lines)


def _percentile(values: list[float], q: float) -> float:
    return float(np.percentile(np.asarray(values), q))


def bench(pipeline: Pipeline, inputs: list[str], repeats: int = 3, workers: int | None = None) -> BenchReport:
    """Run the batch ``repeats`` times after one discarded warm-up pass and
    aggregate per-stage wall times."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    pipeline.run(inputs, workers=workers)  # warm-up, excluded from stats
    samples: dict[str, list[float]] = {}
    t0 = time.perf_counter()
    for _ in range(repeats):
        for result in pipeline.run(inputs, workers=workers):
            for stage, ms in result.timings_ms.items():
                samples.setdefault(stage, []).append(ms)
    elapsed = time.perf_counter() - t0
    med = {stage: statistics.median(vals) for stage, vals in samples.items()}
    p90 = {stage: _percentile(vals, 90.0) for stage, vals in samples.items()}
    return BenchReport(
        stage_median_ms=med,
        stage_p90_ms=p90,
        images_per_sec=(repeats * len(inputs)) / elapsed if elapsed > 0 else float("inf"),
        images=len(inputs),
        repeats=repeats,
    )


def expand_inputs(pattern: str) -> list[str]:
    """Glob expansion with deterministic (sorted) order."""
    return sorted(globmod.glob(pattern))
