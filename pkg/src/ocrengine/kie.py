"""Key information extraction: classify recognized text regions into semantic
fields by message passing over a spatial graph.

Documents are modeled as complete directed graphs whose nodes are text boxes
and whose edges carry scale-free spatial relation features.  Learned weights
(embedding table, edge MLP, update and classifier matrices) are loaded from a
little-endian binary file and validated on load; inference itself is plain
numpy and bit-deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .decoding import Dictionary
from .errors import GeometryError, WeightsError
from .geometry import Polygon

EDGE_FEATURE_DIM = 5

WEIGHTS_MAGIC = b"SDMGRW1"

# Matrix roles in file order.  Shapes are declared in the header; expected
# patterns are in terms of the header dims (V, E, F, K) and the edge MLP's
# hidden width H, which is read off the first edge matrix.
_MATRIX_ROLES = (
    "embedding",  # (V, E)
    "edge_w1",  # (F, H)
    "edge_b1",  # (H,)
    "edge_w2",  # (H, 1)
    "edge_b2",  # (1,)
    "update_self",  # (E, E)
    "update_neighbor",  # (E, E)
    "update_bias",  # (E,)
    "classifier_w",  # (E, K)
    "classifier_b",  # (K,)
)


@dataclass
class KieNode:
    """One graph node: a text box, its transcription and encoded symbols."""

    box: Polygon
    text: str
    text_indices: list[int]
    center: tuple[float, float]
    width: float
    height: float
    text_embedding: NDArray[np.float64] | None = None
    class_scores: NDArray[np.float64] | None = None


@dataclass(frozen=True)
class KieEdge:
    """Directed edge with spatial relation features between two boxes."""

    src: int
    dst: int
    features: NDArray[np.float64]


@dataclass(frozen=True)
class KieWeights:
    """Loaded model parameters; immutable and shareable across threads."""

    embedding: NDArray[np.float32]
    edge_w1: NDArray[np.float32]
    edge_b1: NDArray[np.float32]
    edge_w2: NDArray[np.float32]
    edge_b2: NDArray[np.float32]
    update_self: NDArray[np.float32]
    update_neighbor: NDArray[np.float32]
    update_bias: NDArray[np.float32]
    classifier_w: NDArray[np.float32]
    classifier_b: NDArray[np.float32]
    rounds: int

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def state_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier_w.shape[1]

    def validate(self) -> None:
        v, e = self.embedding.shape
        f, h = self.edge_w1.shape
        checks = [
            ("edge_b1", self.edge_b1.shape, (h,)),
            ("edge_w2", self.edge_w2.shape, (h, 1)),
            ("edge_b2", self.edge_b2.shape, (1,)),
            ("update_self", self.update_self.shape, (e, e)),
            ("update_neighbor", self.update_neighbor.shape, (e, e)),
            ("update_bias", self.update_bias.shape, (e,)),
            ("classifier_w", self.classifier_w.shape[:1], (e,)),
            ("classifier_b", self.classifier_b.shape, (self.classifier_w.shape[1],)),
        ]
        for name, got, want in checks:
            if tuple(got) != tuple(want):
                raise WeightsError(f"{name} has shape {tuple(got)}, expected {tuple(want)}")
        if f != EDGE_FEATURE_DIM:
            raise WeightsError(f"edge MLP expects {f} features, engine produces {EDGE_FEATURE_DIM}")
        if self.rounds < 1:
            raise WeightsError(f"iteration count must be >= 1, got {self.rounds}")


def save_weights(path, weights: KieWeights) -> None:
    """Serialize weights: magic, dimension header, then row-major float32
    matrices in role order."""
    mats = [np.ascontiguousarray(getattr(weights, role), dtype="<f4") for role in _MATRIX_ROLES]
    header = struct.pack(
        "<5I",
        weights.vocab_size,
        weights.state_dim,
        EDGE_FEATURE_DIM,
        weights.num_classes,
        weights.rounds,
    )
    shapes = b"".join(
        struct.pack("<I", m.ndim) + struct.pack(f"<{m.ndim}I", *m.shape) for m in mats
    )
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(header)
        fh.write(struct.pack("<I", len(mats)))
        fh.write(shapes)
        for m in mats:
            fh.write(m.tobytes())


def load_weights(path) -> KieWeights:
    """Read and validate a weight file; raises WeightsError on any mismatch
    between header, payload length or expected matrix shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightsError(f"{path}: bad magic, not a KIE weight file")
    off = len(WEIGHTS_MAGIC)
    try:
        v, e, f, k, rounds = struct.unpack_from("<5I", blob, off)
        off += 20
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            shapes.append(shape)
    except struct.error as exc:
        raise WeightsError(f"{path}: truncated header: {exc}") from exc
    if count != len(_MATRIX_ROLES):
        raise WeightsError(f"{path}: expected {len(_MATRIX_ROLES)} matrices, header declares {count}")
    payload = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blob) - off != payload:
        raise WeightsError(
            f"{path}: payload is {len(blob) - off} bytes, header implies {payload}"
        )
    mats = {}
    for role, shape in zip(_MATRIX_ROLES, shapes):
        n = int(np.prod(shape)) * 4
        mats[role] = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
        off += n
    weights = KieWeights(rounds=rounds, **mats)
    if weights.vocab_size != v or weights.state_dim != e or weights.num_classes != k or f != EDGE_FEATURE_DIM:
        raise WeightsError(f"{path}: header dims (V={v},E={e},F={f},K={k}) disagree with matrix shapes")
    weights.validate()
    return weights


def _box_frame(polygon: Polygon) -> tuple[tuple[float, float], float, float]:
    x0, y0, x1, y1 = polygon.bounds()
    w, h = x1 - x0, y1 - y0
    if h <= 0:
        raise GeometryError("zero-height box cannot anchor edge features")
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0), w, h


def edge_features(src: KieNode, dst: KieNode) -> NDArray[np.float64]:
    """Spatial relation vector [dx/h, dy/h, w_src/h, h_dst/h, w_dst/h], all
    normalized by the source box height so the features are translation
    invariant and unchanged under global rescaling."""
    h = src.height
    return np.array(
        [
            (dst.center[0] - src.center[0]) / h,
            (dst.center[1] - src.center[1]) / h,
            src.width / h,
            dst.height / h,
            dst.width / h,
        ]
    )


def build_graph(instances, dictionary: Dictionary) -> tuple[list[KieNode], list[KieEdge]]:
    """One node per text instance plus the complete directed edge set.

    ``instances`` is a sequence of objects with ``polygon`` and ``text``
    attributes (pipeline TextInstances), or (polygon, text) pairs.
    """
    if not instances:
        raise ValueError("graph needs at least one instance")
    nodes: list[KieNode] = []
    for inst in instances:
        polygon, text = (inst.polygon, inst.text) if hasattr(inst, "polygon") else inst
        center, w, h = _box_frame(polygon)
        nodes.append(
            KieNode(
                box=polygon,
                text=text,
                text_indices=dictionary.encode(text),
                center=center,
                width=w,
                height=h,
            )
        )
    edges = [
        KieEdge(src=i, dst=j, features=edge_features(nodes[i], nodes[j]))
        for i in range(len(nodes))
        for j in range(len(nodes))
        if i != j
    ]
    return nodes, edges


def _softmax_rows(x: NDArray[np.float64]) -> NDArray[np.float64]:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kie_infer(
    nodes: list[KieNode],
    edges: list[KieEdge],
    weights: KieWeights,
    visual_features: NDArray | None = None,
) -> NDArray[np.float64]:
    """Run R rounds of edge-gated message passing and classify every node.

    Node states start from mean-pooled symbol embeddings (plus optional
    visual vectors, zeros by default).  Each round, edge features pass
    through the edge MLP to a scalar gate, gates are softmax-normalized over
    each node's incoming edges, and states update as
    ``relu(W_self h + W_nbr m + b) + text_embedding``.  Returns an (N, K)
    array of per-node class probabilities (rows sum to 1).
    """
    weights.validate()
    n = len(nodes)
    dim = weights.state_dim
    emb_table = weights.embedding.astype(np.float64)
    emb = np.zeros((n, dim))
    for i, node in enumerate(nodes):
        if node.text_indices:
            idx = np.asarray(node.text_indices)
            if idx.min(initial=0) < 0 or idx.max(initial=-1) >= weights.vocab_size:
                raise WeightsError(
                    f"node {i} has symbol index outside embedding table (V={weights.vocab_size})"
                )
            emb[i] = emb_table[idx].mean(axis=0)
        node.text_embedding = emb[i]
    if visual_features is not None:
        vis = np.asarray(visual_features, dtype=np.float64)
        if vis.shape != (n, dim):
            raise WeightsError(f"visual features must be ({n}, {dim}), got {vis.shape}")
        emb = emb + vis

    # Scalar gate per directed edge.
    gates = np.full((n, n), -np.inf)
    if edges:
        feats = np.stack([e.features for e in edges])
        hid = np.maximum(feats @ weights.edge_w1.astype(np.float64) + weights.edge_b1, 0.0)
        raw = (hid @ weights.edge_w2.astype(np.float64) + weights.edge_b2).ravel()
        for e, g in zip(edges, raw):
            gates[e.dst, e.src] = g  # row = receiving node, col = sending node

    w_self = weights.update_self.astype(np.float64)
    w_nbr = weights.update_neighbor.astype(np.float64)
    b_upd = weights.update_bias.astype(np.float64)

    # Incoming-edge attention; rows with no incoming edges get zero messages.
    has_in = np.isfinite(gates).any(axis=1)
    alpha = np.zeros((n, n))
    if has_in.any():
        alpha[has_in] = _softmax_rows(gates[has_in])

    h = emb
    for _ in range(weights.rounds):
        messages = alpha @ h
        h = np.maximum(h @ w_self + messages @ w_nbr + b_upd, 0.0) + emb

    logits = h @ weights.classifier_w.astype(np.float64) + weights.classifier_b
    scores = _softmax_rows(logits)
    for i, node in enumerate(nodes):
        node.class_scores = scores[i]
    return scores


def extract_entities(
    nodes: list[KieNode],
    scores: NDArray[np.float64],
    class_names: list[str],
    background_class: str | None = None,
) -> dict[str, list[str]]:
    """Assign each node its argmax class and group texts per class in reading
    order (top-to-bottom, then left-to-right by box center).  Nodes hitting
    ``background_class`` are dropped."""
    scores = np.asarray(scores)
    if scores.shape[0] != len(nodes) or scores.shape[1] != len(class_names):
        raise ValueError(
            f"scores shape {scores.shape} does not match {len(nodes)} nodes x {len(class_names)} classes"
        )
    order = sorted(range(len(nodes)), key=lambda i: (nodes[i].center[1], nodes[i].center[0]))
    entities: dict[str, list[str]] = {}
    for i in order:
        name = class_names[int(np.argmax(scores[i]))]
        if background_class is not None and name == background_class:
            continue
        entities.setdefault(name, []).append(nodes[i].text)
    return entities
