"""Model-inference boundary: preprocessed image tensors in, named output
tensors out.

Network internals (backbones, necks, heads) always live inside exported
models behind this boundary.  Two implementations are provided: a
deterministic mock that renders configured scenes (rectangles into
probability/kernel/similarity maps, scripted texts into logit paths) so the
full pipeline is testable without weights, and a runner for exported .onnx
models with a JSON sidecar describing preprocessing and output roles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .errors import BackendError, ConfigError, ShapeError

ROLES = ("prob_map", "kernel_stack", "similarity", "logits")
SCORE_CONVENTIONS = ("probabilities", "logits", "log_probabilities")
RESIZE_POLICIES = ("none", "stretch", "fit_pad")


@dataclass(frozen=True)
class OutputDecl:
    name: str
    role: str


@dataclass(frozen=True)
class ModelSpec:
    """What a model expects and produces: input name/shape/normalization plus
    named outputs with their roles and score convention."""

    input_name: str = "images"
    channels: int = 3
    height: int | None = None  # None = dynamic spatial dims
    width: int | None = None
    resize: str = "none"
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)
    outputs: tuple[OutputDecl, ...] = ()
    scores: str = "probabilities"

    def __post_init__(self):
        if not self.outputs:
            raise ConfigError("model spec declares no outputs")
        for decl in self.outputs:
            if decl.role not in ROLES:
                raise ConfigError(f"unknown output role {decl.role!r}; expected one of {ROLES}")
        if self.scores not in SCORE_CONVENTIONS:
            raise ConfigError(f"unknown score convention {self.scores!r}")
        if self.resize not in RESIZE_POLICIES:
            raise ConfigError(f"unknown resize policy {self.resize!r}")
        if self.resize != "none" and (self.height is None or self.width is None):
            raise ConfigError(f"resize policy {self.resize!r} needs explicit height and width")
        if len(self.mean) not in (1, self.channels) or len(self.std) not in (1, self.channels):
            raise ConfigError("mean/std must have 1 entry or one per channel")

    @property
    def roles(self) -> set[str]:
        return {decl.role for decl in self.outputs}

    def output_for_role(self, role: str) -> str:
        for decl in self.outputs:
            if decl.role == role:
                return decl.name
        raise BackendError(f"model spec has no output with role {role!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        try:
            inp = doc.get("input", {})
            outputs = tuple(OutputDecl(o["name"], o["role"]) for o in doc["outputs"])
            return cls(
                input_name=inp.get("name", "images"),
                channels=int(inp.get("channels", 3)),
                height=inp.get("height"),
                width=inp.get("width"),
                resize=inp.get("resize", "none"),
                mean=tuple(float(v) for v in _as_seq(inp.get("mean", [0.0]))),
                std=tuple(float(v) for v in _as_seq(inp.get("std", [1.0]))),
                outputs=outputs,
                scores=doc.get("scores", "probabilities"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ModelSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read model spec {path}: {exc}") from exc
        return cls.from_dict(doc)


def _as_seq(v):
    return v if isinstance(v, (list, tuple)) else [v]


@dataclass(frozen=True)
class PreprocessRecord:
    """Everything needed to map coordinates back to the original image."""

    orig_h: int
    orig_w: int
    scale_x: float
    scale_y: float
    pad_right: int
    pad_bottom: int
    out_h: int
    out_w: int


def _match_channels(image: NDArray, channels: int) -> NDArray:
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ShapeError(f"image must be HxW or HxWxC, got shape {image.shape}")
    have = image.shape[2]
    if have == channels:
        return image
    if have == 1 and channels == 3:
        return np.repeat(image, 3, axis=2)
    if have == 3 and channels == 1:
        return image.mean(axis=2, keepdims=True)
    raise BackendError(f"unsupported channel count: image has {have}, model wants {channels}")


def preprocess(image, spec: ModelSpec) -> tuple[NDArray[np.float32], PreprocessRecord]:
    """Resize per policy, scale bytes to [0, 1], normalize per channel.

    Returns an NCHW float32 tensor plus the record for coordinate
    back-mapping.  fit_pad anchors the image top-left and pads right/bottom
    with zeros."""
    arr = np.asarray(image)
    if arr.size == 0:
        raise ShapeError("empty image")
    arr = _match_channels(arr, spec.channels)
    h, w = arr.shape[:2]
    pad_r = pad_b = 0
    if spec.resize == "none":
        out = arr.astype(np.float64)
        sx = sy = 1.0
        out_h, out_w = h, w
    else:
        th, tw = int(spec.height), int(spec.width)
        if spec.resize == "stretch":
            new_w, new_h = tw, th
        else:  # fit_pad
            s = min(tw / w, th / h)
            new_w = max(1, round(w * s))
            new_h = max(1, round(h * s))
        resized = np.stack(
            [
                np.asarray(
                    Image.fromarray(np.ascontiguousarray(arr[:, :, c])).resize(
                        (new_w, new_h), Image.BILINEAR
                    )
                )
                for c in range(arr.shape[2])
            ],
            axis=2,
        )
        sx, sy = new_w / w, new_h / h
        pad_r, pad_b = tw - new_w, th - new_h
        out = np.zeros((th, tw, arr.shape[2]), dtype=np.float64)
        out[:new_h, :new_w] = resized
        out_h, out_w = th, tw
    out = out / 255.0
    mean = np.broadcast_to(np.asarray(spec.mean, dtype=np.float64), (out.shape[2],))
    std = np.broadcast_to(np.asarray(spec.std, dtype=np.float64), (out.shape[2],))
    out = (out - mean) / std
    tensor = np.transpose(out, (2, 0, 1))[None].astype(np.float32)
    record = PreprocessRecord(
        orig_h=h, orig_w=w, scale_x=sx, scale_y=sy,
        pad_right=pad_r, pad_bottom=pad_b, out_h=out_h, out_w=out_w,
    )
    return tensor, record


def map_points(points: NDArray, record: PreprocessRecord) -> NDArray[np.float64]:
    """Inverse of the preprocessing resize/pad for (N, 2) pixel coordinates,
    clipped to the original canvas."""
    pts = np.asarray(points, dtype=np.float64).copy()
    pts[:, 0] /= record.scale_x
    pts[:, 1] /= record.scale_y
    pts[:, 0] = np.clip(pts[:, 0], -0.5, record.orig_w - 0.5)
    pts[:, 1] = np.clip(pts[:, 1], -0.5, record.orig_h - 0.5)
    return pts


def map_coords(detections, record: PreprocessRecord):
    """Map detection polygons from model space back to the original image."""
    from .detection import Detection
    from .geometry import Polygon

    out = []
    for det in detections:
        out.append(Detection(polygon=Polygon(map_points(det.polygon.vertices, record)), score=det.score))
    return out


def to_probability_map(arr: NDArray, convention: str) -> NDArray[np.float64]:
    """Convert a map-role output to probabilities per the declared convention."""
    arr = np.asarray(arr, dtype=np.float64)
    if convention == "probabilities":
        return arr
    if convention == "logits":
        return 1.0 / (1.0 + np.exp(-arr))
    return np.exp(arr)  # log_probabilities


def to_decoder_scores(arr: NDArray, convention: str) -> NDArray[np.float64]:
    """Convert a logits-role output to what the decoders expect (anything
    softmax maps to the right distribution: logits or log-probabilities)."""
    arr = np.asarray(arr, dtype=np.float64)
    if convention == "probabilities":
        return np.log(np.maximum(arr, 1e-300))
    return arr


class MockBackend:
    """Deterministic stand-in for neural inference.

    Detector scenes are lists of rectangles rendered into a probability map
    (plus optional shrunk kernel maps and per-instance similarity basis
    vectors) at the input tensor's spatial size.  Recognizer scenes script
    texts keyed by the crop's mean intensity, emitted as peaked logit paths
    whose greedy CTC decode returns the scripted text.
    """

    def __init__(self, scene: dict, spec: ModelSpec | None = None):
        if not isinstance(scene, dict) or "kind" not in scene:
            raise ConfigError("mock scene must be a dict with a 'kind' field")
        self.scene = scene
        kind = scene["kind"]
        if kind == "detector":
            self._validate_detector(scene)
        elif kind == "recognizer":
            self._validate_recognizer(scene)
        else:
            raise ConfigError(f"unknown mock scene kind {kind!r}")
        self.spec = spec if spec is not None else self._default_spec(scene)

    @staticmethod
    def _validate_detector(scene: dict) -> None:
        for i, rect in enumerate(scene.get("rects", [])):
            for key in ("x", "y", "w", "h"):
                if key not in rect:
                    raise ConfigError(f"mock rect #{i} missing field {key!r}")
            if not 0.0 <= rect.get("p", 0.9) <= 1.0:
                raise ConfigError(f"mock rect #{i} probability outside [0,1]")
        shrinks = scene.get("kernel_shrinks", [])
        if shrinks and (sorted(shrinks) != list(shrinks) or shrinks[-1] > 1.0 or min(shrinks) <= 0):
            raise ConfigError("kernel_shrinks must be ascending factors in (0, 1]")

    @staticmethod
    def _validate_recognizer(scene: dict) -> None:
        if not scene.get("characters"):
            raise ConfigError("recognizer scene needs a 'characters' string")
        chars = scene["characters"]
        timesteps = scene.get("timesteps")
        for i, entry in enumerate(scene.get("entries", [])):
            if "text" not in entry or "gray" not in entry:
                raise ConfigError(f"recognizer entry #{i} needs 'gray' and 'text'")
            for ch in entry["text"]:
                if ch not in chars:
                    raise ConfigError(f"entry #{i} text uses {ch!r} not in scene characters")
            if timesteps is not None and timesteps < 2 * len(entry["text"]) - 1:
                raise ConfigError(f"timesteps={timesteps} too short for entry #{i}")

    @staticmethod
    def _default_spec(scene: dict) -> ModelSpec:
        if scene["kind"] == "detector":
            outputs = [OutputDecl("prob", "prob_map")]
            if scene.get("kernel_shrinks"):
                outputs.append(OutputDecl("kernels", "kernel_stack"))
            if scene.get("similarity_dim"):
                outputs.append(OutputDecl("similarity", "similarity"))
            return ModelSpec(channels=1, outputs=tuple(outputs), scores="probabilities")
        return ModelSpec(
            channels=1,
            outputs=(OutputDecl("logits", "logits"),),
            scores="logits",
        )

    def forward(self, tensor: NDArray) -> dict[str, NDArray]:
        arr = np.asarray(tensor)
        if arr.ndim != 4:
            raise ShapeError(f"expected NCHW tensor, got shape {arr.shape}")
        if self.scene["kind"] == "detector":
            return self._forward_detector(arr.shape[2], arr.shape[3])
        return self._forward_recognizer(arr)

    def _forward_detector(self, h: int, w: int) -> dict[str, NDArray]:
        rects = self.scene.get("rects", [])
        prob = np.zeros((h, w), dtype=np.float32)
        for rect in rects:
            x0, y0 = int(rect["x"]), int(rect["y"])
            x1, y1 = min(w, x0 + int(rect["w"])), min(h, y0 + int(rect["h"]))
            x0, y0 = max(0, x0), max(0, y0)
            if x1 > x0 and y1 > y0:
                patch = prob[y0:y1, x0:x1]
                np.maximum(patch, float(rect.get("p", 0.9)), out=patch)
        out = {self.spec.output_for_role("prob_map"): prob}
        shrinks = self.scene.get("kernel_shrinks")
        if shrinks:
            stack = np.zeros((len(shrinks), h, w), dtype=np.float32)
            for level, s in enumerate(shrinks):
                for rect in rects:
                    kw = max(1, round(int(rect["w"]) * s))
                    kh = max(1, round(int(rect["h"]) * s))
                    x0 = int(rect["x"]) + (int(rect["w"]) - kw) // 2
                    y0 = int(rect["y"]) + (int(rect["h"]) - kh) // 2
                    x1, y1 = min(w, x0 + kw), min(h, y0 + kh)
                    x0, y0 = max(0, x0), max(0, y0)
                    if x1 > x0 and y1 > y0:
                        stack[level, y0:y1, x0:x1] = 1.0
            out[self.spec.output_for_role("kernel_stack")] = stack
        dim = self.scene.get("similarity_dim")
        if dim:
            sim = np.zeros((h, w, int(dim)), dtype=np.float32)
            for i, rect in enumerate(rects):
                x0, y0 = max(0, int(rect["x"])), max(0, int(rect["y"]))
                x1 = min(w, int(rect["x"]) + int(rect["w"]))
                y1 = min(h, int(rect["y"]) + int(rect["h"]))
                if x1 > x0 and y1 > y0:
                    sim[y0:y1, x0:x1, i % int(dim)] = 1.0
            out[self.spec.output_for_role("similarity")] = sim
        return out

    def _forward_recognizer(self, tensor: NDArray) -> dict[str, NDArray]:
        chars = self.scene["characters"]
        blank = len(chars)
        entries = self.scene.get("entries", [])
        text = ""
        if entries:
            # Undo normalization so matching happens on mean gray in [0, 1].
            mean = float(np.mean(tensor))
            mean_gray = mean * float(np.mean(self.spec.std)) + float(np.mean(self.spec.mean))
            best = min(enumerate(entries), key=lambda kv: (abs(kv[1]["gray"] - mean_gray), kv[0]))
            text = best[1]["text"]
        peak = float(self.scene.get("peak", 0.9))
        timesteps = self.scene.get("timesteps") or 2 * len(text) + 1
        n_classes = blank + 1
        # Logit value giving softmax probability `peak` against zero elsewhere.
        v = math.log(peak * (n_classes - 1) / (1.0 - peak)) if n_classes > 1 else 1.0
        logits = np.zeros((timesteps, n_classes), dtype=np.float32)
        logits[:, blank] = v
        for i, ch in enumerate(text):
            step = 2 * i
            logits[step, blank] = 0.0
            logits[step, chars.index(ch)] = v
        return {self.spec.output_for_role("logits"): logits}


class OnnxBackend:
    """Runner for exported models in the open neural-network exchange format.

    Loads ``<model>.onnx`` with onnxruntime and reads the ModelSpec from the
    JSON sidecar next to it (``<model>.json``) unless one is given."""

    def __init__(self, model_path, spec: ModelSpec | None = None):
        self.model_path = str(model_path)
        if not Path(self.model_path).is_file():
            raise BackendError(f"model file not found: {self.model_path}")
        if spec is None:
            sidecar = Path(self.model_path).with_suffix(".json")
            if not sidecar.is_file():
                raise BackendError(f"no model spec sidecar next to {self.model_path}")
            spec = ModelSpec.load(sidecar)
        self.spec = spec
        try:
            import onnxruntime  # deferred: heavy optional dependency
        except ImportError as exc:
            raise BackendError(
                f"cannot load {self.model_path}: onnxruntime is not installed "
                "(install the 'onnx' extra)"
            ) from exc
        try:
            self._session = onnxruntime.InferenceSession(
                self.model_path, providers=["CPUExecutionProvider"]
            )
        except Exception as exc:
            raise BackendError(f"failed to load {self.model_path}: {exc}") from exc

    def forward(self, tensor: NDArray) -> dict[str, NDArray]:
        names = [decl.name for decl in self.spec.outputs]
        try:
            results = self._session.run(names, {self.spec.input_name: np.asarray(tensor, dtype=np.float32)})
        except Exception as exc:
            raise BackendError(f"inference failed for {self.model_path}: {exc}") from exc
        return dict(zip(names, results))


def load_backend(ref: dict):
    """Build a backend from its config reference: ``{"type": "mock", "scene":
    {...}}`` or ``{"type": "onnx", "path": "model.onnx"}`` (optional "spec"
    being a path or inline spec document in either case)."""
    if not isinstance(ref, dict) or "type" not in ref:
        raise ConfigError("model reference must be a dict with a 'type' field")
    spec = None
    if "spec" in ref and ref["spec"] is not None:
        spec = ModelSpec.load(ref["spec"]) if isinstance(ref["spec"], str) else ModelSpec.from_dict(ref["spec"])
    if ref["type"] == "mock":
        if "scene" not in ref:
            raise ConfigError("mock model reference needs a 'scene'")
        return MockBackend(ref["scene"], spec)
    if ref["type"] == "onnx":
        if "path" not in ref:
            raise ConfigError("onnx model reference needs a 'path'")
        return OnnxBackend(ref["path"], spec)
    raise ConfigError(f"unknown backend type {ref['type']!r}")
