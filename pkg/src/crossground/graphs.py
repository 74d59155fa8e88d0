"""Hierarchical semantic graphs for videos and language queries.

A video graph holds per-segment action and object nodes built from
detector-style annotations; a language graph holds one action node per
predicate and one object node per (predicate, argument) pair. Event nodes
are appended later by the encoder. Node features start as word-embedding
sums and stay in word-vector space until the model projects them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KIND_ACTION = "action"
KIND_OBJECT = "object"
KIND_EVENT = "event"

REL_ACTION_ACTION = "action-action"
REL_ACTION_OBJECT = "action-object"
REL_OBJECT_OBJECT = "object-object"
RELATIONS = (REL_ACTION_ACTION, REL_ACTION_OBJECT, REL_OBJECT_OBJECT)

UNK_LABEL = "[unk]"
MASK_LABEL = "[mask]"

SIDE_VIDEO = "video"
SIDE_LANGUAGE = "language"


class GraphError(Exception):
    pass


# ---------------------------------------------------------------------------
# annotations

@dataclass
class Segment:
    frames: np.ndarray                      # (K, D_f) float32
    actions: list[tuple[str, float]]        # (label, score), score in [0, 1]
    objects: list[tuple[str, float]]


@dataclass
class VideoAnnotation:
    video_id: str
    duration: float
    segments: list[Segment]

    def validate(self) -> "VideoAnnotation":
        if not self.segments:
            raise GraphError(f"video {self.video_id}: zero segments")
        if self.duration <= 0:
            raise GraphError(f"video {self.video_id}: nonpositive duration")
        width = self.segments[0].frames.shape[1]
        for i, seg in enumerate(self.segments):
            if seg.frames.ndim != 2 or seg.frames.shape[0] < 1:
                raise GraphError(f"video {self.video_id}: segment {i} has no frames")
            if seg.frames.shape[1] != width:
                raise GraphError(
                    f"video {self.video_id}: segment {i} frame width "
                    f"{seg.frames.shape[1]} != {width}")
            for label, score in seg.actions + seg.objects:
                if not (0.0 <= score <= 1.0):
                    raise GraphError(
                        f"video {self.video_id}: score {score} for '{label}' "
                        f"outside [0, 1]")
        return self

    @property
    def frame_dim(self) -> int:
        return self.segments[0].frames.shape[1]


@dataclass
class QueryStructure:
    predicate: str
    arguments: list[str]


@dataclass
class QueryAnnotation:
    query_id: str
    video_id: str
    structures: list[QueryStructure]
    tokens: list[str]
    gt_interval: tuple[float, float]        # seconds

    def validate(self, duration: float | None = None) -> "QueryAnnotation":
        if not self.structures:
            raise GraphError(f"query {self.query_id}: zero structures")
        s, e = self.gt_interval
        if not (0.0 <= s <= e):
            raise GraphError(f"query {self.query_id}: bad interval ({s}, {e})")
        if duration is not None and e > duration + 1e-6:
            raise GraphError(
                f"query {self.query_id}: interval end {e} beyond duration {duration}")
        return self

    def normalized_interval(self, duration: float) -> tuple[float, float]:
        s, e = self.gt_interval
        return (min(max(s / duration, 0.0), 1.0), min(max(e / duration, 0.0), 1.0))


# ---------------------------------------------------------------------------
# graph structure

@dataclass
class SemanticNode:
    kind: str                            # action | object | event
    label: str                           # empty for event nodes
    owner: int | None                    # segment / structure index; None for events
    feature: np.ndarray                  # (d_w,) word-vector-space feature


@dataclass
class HierarchicalSemanticGraph:
    nodes: list[SemanticNode]
    edges: list[tuple[int, int, str]]    # (i, j, relation) with i < j
    side: str

    @property
    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([n.feature for n in self.nodes]).astype(np.float32)


@dataclass
class MaskRecord:
    indices: list[int]
    original_labels: list[str]
    probability: float
    seed: int


# ---------------------------------------------------------------------------
# embeddings

def _hash_seed(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


class EmbeddingTable:
    """Word-vector source: known vectors from an optional GloVe-format file,
    deterministic unit-norm hash vectors for everything else."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None,
                 seed_tag: str = "emb"):
        self.dim = dim
        self.vectors = dict(vectors or {})
        self.seed_tag = seed_tag

    @classmethod
    def from_text_file(cls, path: str | Path, seed_tag: str = "emb") -> "EmbeddingTable":
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float32)
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise GraphError(f"embedding file: inconsistent width at '{parts[0]}'")
                vectors[parts[0]] = vec
        if dim is None:
            raise GraphError(f"embedding file {path} is empty")
        return cls(dim, vectors, seed_tag)

    def vector(self, word: str) -> np.ndarray:
        if word in self.vectors:
            return self.vectors[word]
        rng = np.random.default_rng(_hash_seed(f"{self.seed_tag}:{word}"))
        v = rng.standard_normal(self.dim).astype(np.float32)
        v /= np.linalg.norm(v)
        self.vectors[word] = v
        return v

    def embed_label(self, label: str) -> np.ndarray:
        """Sum of the per-word vectors of a (possibly multi-word) label."""
        words = label.split()
        if not words:
            raise GraphError("embed_label: empty label")
        out = np.zeros(self.dim, dtype=np.float32)
        for w in words:
            out += self.vector(w)
        return out

    @property
    def mask_vector(self) -> np.ndarray:
        return self.vector(MASK_LABEL)


# ---------------------------------------------------------------------------
# construction

def _top_k(cands: list[tuple[str, float]], k: int) -> list[str]:
    # highest score first; ties by label, then detector list order
    ranked = sorted(
        enumerate(cands), key=lambda it: (-it[1][1], it[1][0], it[0]))
    labels = [label for _, (label, _) in ranked[:k]]
    while len(labels) < k:
        labels.append(UNK_LABEL)
    return labels


def build_video_graph(ann: VideoAnnotation, table: EmbeddingTable,
                      actions_per_segment: int,
                      objects_per_segment: int) -> HierarchicalSemanticGraph:
    """Per segment: the top-scoring action and object labels become nodes,
    padded with a reserved unknown label up to the fixed quotas."""
    ann.validate()
    nodes: list[SemanticNode] = []
    for t, seg in enumerate(ann.segments):
        for label in _top_k(seg.actions, actions_per_segment):
            nodes.append(SemanticNode(KIND_ACTION, label, t, table.embed_label(label)))
        for label in _top_k(seg.objects, objects_per_segment):
            nodes.append(SemanticNode(KIND_OBJECT, label, t, table.embed_label(label)))
    return HierarchicalSemanticGraph(nodes=nodes, edges=[], side=SIDE_VIDEO)


def build_language_graph(q: QueryAnnotation,
                         table: EmbeddingTable) -> HierarchicalSemanticGraph:
    """One action node per predicate; one object node per (predicate,
    argument) pair — shared phrases are duplicated per predicate."""
    q.validate()
    nodes: list[SemanticNode] = []
    for i, st in enumerate(q.structures):
        nodes.append(SemanticNode(KIND_ACTION, st.predicate, i,
                                  table.embed_label(st.predicate)))
        for arg in st.arguments:
            nodes.append(SemanticNode(KIND_OBJECT, arg, i, table.embed_label(arg)))
    return HierarchicalSemanticGraph(nodes=nodes, edges=[], side=SIDE_LANGUAGE)


def wire_edges(g: HierarchicalSemanticGraph) -> HierarchicalSemanticGraph:
    """Connect object-object and action-object pairs within each segment or
    structure, and every action pair graph-wide. No self-loops; each edge
    stored once with i < j."""
    if g.edges:
        raise GraphError("wire_edges: graph already has edges")
    actions = [i for i, n in enumerate(g.nodes) if n.kind == KIND_ACTION]
    by_owner: dict[int, dict[str, list[int]]] = {}
    for i, n in enumerate(g.nodes):
        if n.kind == KIND_EVENT:
            continue
        slot = by_owner.setdefault(n.owner, {KIND_ACTION: [], KIND_OBJECT: []})
        slot[n.kind].append(i)
    edges: list[tuple[int, int, str]] = []
    for owner in sorted(by_owner):
        objs = by_owner[owner][KIND_OBJECT]
        acts = by_owner[owner][KIND_ACTION]
        for a in range(len(objs)):
            for b in range(a + 1, len(objs)):
                edges.append((objs[a], objs[b], REL_OBJECT_OBJECT))
        for i in acts:
            for j in objs:
                edges.append((min(i, j), max(i, j), REL_ACTION_OBJECT))
    for a in range(len(actions)):
        for b in range(a + 1, len(actions)):
            edges.append((actions[a], actions[b], REL_ACTION_ACTION))
    g.edges = edges
    return g


def relation_masks(g: HierarchicalSemanticGraph) -> dict[str, np.ndarray]:
    """Symmetric 0/1 adjacency per relation type, diagonal excluded."""
    n = len(g.nodes)
    masks = {r: np.zeros((n, n), dtype=np.float32) for r in RELATIONS}
    for i, j, rel in g.edges:
        masks[rel][i, j] = 1.0
        masks[rel][j, i] = 1.0
    return masks


def mask_nodes(g: HierarchicalSemanticGraph, p: float, seed: int,
               table: EmbeddingTable) -> tuple[HierarchicalSemanticGraph, MaskRecord]:
    """Independently mask action/object nodes with probability p, replacing
    their features with the reserved mask embedding. Video graphs only."""
    if g.side != SIDE_VIDEO:
        raise GraphError("mask_nodes: masking applies to video-side graphs only")
    if not (0.0 <= p <= 1.0):
        raise GraphError(f"mask_nodes: probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    maskable = [i for i, n in enumerate(g.nodes) if n.kind != KIND_EVENT]
    draws = rng.random(len(maskable))
    picked = [i for i, u in zip(maskable, draws) if u < p]
    mask_vec = table.mask_vector
    new_nodes = []
    for i, n in enumerate(g.nodes):
        if i in set(picked):
            new_nodes.append(SemanticNode(n.kind, MASK_LABEL, n.owner, mask_vec.copy()))
        else:
            new_nodes.append(n)
    record = MaskRecord(
        indices=picked,
        original_labels=[g.nodes[i].label for i in picked],
        probability=p, seed=seed)
    return HierarchicalSemanticGraph(new_nodes, list(g.edges), g.side), record


# ---------------------------------------------------------------------------
# JSON annotation IO (one object per line, or a single JSON array)

def _iter_json_records(path: str | Path):
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return
    if text[0] == "[":
        yield from json.loads(text)
    else:
        for line in text.splitlines():
            line = line.strip()
            if line:
                yield json.loads(line)


def video_from_dict(doc: dict) -> VideoAnnotation:
    segments = [
        Segment(
            frames=np.asarray(seg["frames"], dtype=np.float32),
            actions=[(str(a[0]), float(a[1])) for a in seg["actions"]],
            objects=[(str(o[0]), float(o[1])) for o in seg["objects"]],
        )
        for seg in doc["segments"]
    ]
    return VideoAnnotation(str(doc["video_id"]), float(doc["duration"]),
                           segments).validate()


def query_from_dict(doc: dict) -> QueryAnnotation:
    structures = [
        QueryStructure(str(s["predicate"]), [str(a) for a in s["arguments"]])
        for s in doc["structures"]
    ]
    gt = doc["gt_interval"]
    return QueryAnnotation(
        str(doc["query_id"]), str(doc["video_id"]), structures,
        [str(t) for t in doc.get("tokens", [])],
        (float(gt[0]), float(gt[1]))).validate()


def video_to_dict(ann: VideoAnnotation) -> dict:
    return {
        "video_id": ann.video_id,
        "duration": ann.duration,
        "segments": [
            {
                "frames": [[float(x) for x in row] for row in seg.frames],
                "actions": [[label, score] for label, score in seg.actions],
                "objects": [[label, score] for label, score in seg.objects],
            }
            for seg in ann.segments
        ],
    }


def query_to_dict(q: QueryAnnotation) -> dict:
    return {
        "query_id": q.query_id,
        "video_id": q.video_id,
        "structures": [
            {"predicate": s.predicate, "arguments": list(s.arguments)}
            for s in q.structures
        ],
        "tokens": list(q.tokens),
        "gt_interval": [q.gt_interval[0], q.gt_interval[1]],
    }


def load_video_annotations(path: str | Path) -> dict[str, VideoAnnotation]:
    out = {}
    for doc in _iter_json_records(path):
        ann = video_from_dict(doc)
        out[ann.video_id] = ann
    return out


def load_query_annotations(path: str | Path) -> list[QueryAnnotation]:
    return [query_from_dict(doc) for doc in _iter_json_records(path)]


def save_ndjson(path: str | Path, docs: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
