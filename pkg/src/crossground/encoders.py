"""Node contextualization and event aggregation for hierarchical graphs.

Three stages refine the projected node features of one graph:
  * semantic contextualization: per-relation attention over graph
    neighbors, with a residual self term so isolated nodes keep identity;
  * visual contextualization (video side): a sigmoid filter gates each
    frame of a node's segment, the max-pooled filtered frames are fused
    back into the node;
  * event aggregation: learnable query vectors attend over all
    action/object nodes, and the resulting event rows complete the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import RELATIONS, HierarchicalSemanticGraph
from .tensor import Tape, Tensor


@dataclass
class SegmentBlock:
    """Per-segment constants used by the visual stage and the predictor."""

    node_start: int
    node_end: int
    frame_count: int
    frame_block: Tensor        # (n_nodes*K, D_f), frames tiled per node
    mean_block: np.ndarray     # (n_nodes*K, D_f), segment mean row tiled


def trace_rows(trace: dict | None, key: str, rows: Tensor,
               row_filter: np.ndarray | None = None) -> None:
    """Stash attention rows (optionally only rows with support) for
    invariant checking."""
    if trace is None:
        return
    vals = rows.values
    if row_filter is not None:
        vals = vals[row_filter]
    if vals.size:
        trace.setdefault(key, []).append(np.asarray(vals, dtype=np.float64).copy())


def contextualize_semantics(
    feats: Tensor,
    rel_masks: dict[str, np.ndarray],
    layer_params: list[dict[str, tuple[Tensor, Tensor]]],
    tape: Tape | None,
    trace: dict | None = None,
) -> Tensor:
    """Stack relation-aware attention layers.

    Per layer and relation r: attention over r-neighbors built from one
    shared projection on both sides of the score, messages through a second
    projection, all relations summed onto a residual copy of the input.
    """
    s = feats
    for params in layer_params:
        acc = s  # residual self term: empty neighborhoods pass through
        for rel in RELATIONS:
            w, u = params[rel]
            mask = rel_masks[rel]
            proj = T.matmul(s, w, tape)
            scores = T.matmul(proj, T.transpose(proj, tape), tape)
            alpha = T.masked_softmax_rows(scores, mask, tape)
            trace_rows(trace, "attn.semantic", alpha, mask.sum(axis=1) > 0)
            msg = T.matmul(alpha, T.matmul(s, u, tape), tape)
            acc = T.add(acc, msg, tape)
        s = acc
    return s


def build_segment_blocks(graph: HierarchicalSemanticGraph,
                         frames_per_segment: list[np.ndarray]) -> list[SegmentBlock]:
    """Precompute tiled frame constants; node rows of one segment are
    contiguous by construction."""
    blocks = []
    owners = [n.owner for n in graph.nodes]
    for t, frames in enumerate(frames_per_segment):
        rows = [i for i, o in enumerate(owners) if o == t]
        if not rows:
            continue
        start, end = rows[0], rows[-1] + 1
        n_nodes = end - start
        k = frames.shape[0]
        tiles = np.tile(frames, (n_nodes, 1)).astype(np.float32)
        mean = frames.mean(axis=0, keepdims=True).astype(np.float32)
        blocks.append(SegmentBlock(
            node_start=start, node_end=end, frame_count=k,
            frame_block=T.const(tiles),
            mean_block=np.tile(mean, (n_nodes * k, 1)).astype(np.float32)))
    return blocks


def contextualize_visual(
    feats: Tensor,
    blocks: list[SegmentBlock],
    gate_w: Tensor, gate_b: Tensor, fuse_w: Tensor,
    tape: Tape | None,
    trace: dict | None = None,
) -> Tensor:
    """Gate each frame by a sigmoid filter of [node; segment mean; frame],
    max-pool the filtered frames, and fuse them back to node width."""
    outs = []
    for blk in blocks:
        if blk.frame_count < 1:
            raise T.EngineError("contextualize_visual: segment with zero frames")
        seg = T.slice_rows(feats, blk.node_start, blk.node_end, tape)
        rep = T.repeat_rows(seg, blk.frame_count, tape)
        gin = T.concat_cols([rep, T.const(blk.mean_block), blk.frame_block], tape)
        gates = T.sigmoid(T.broadcast_add(T.matmul(gin, gate_w, tape), gate_b, tape), tape)
        if trace is not None:
            trace.setdefault("gates", []).append(
                np.asarray(gates.values, dtype=np.float64).copy())
        filtered = T.mul(gates, blk.frame_block, tape)
        pooled = T.group_max_rows(filtered, blk.frame_count, tape)
        outs.append(T.matmul(T.concat_cols([seg, pooled], tape), fuse_w, tape))
    return T.concat_rows(outs, tape)


def aggregate_events(
    feats: Tensor,
    queries: Tensor,
    layer_params: list[tuple[Tensor, Tensor]],
    tape: Tape | None,
    trace: dict | None = None,
) -> Tensor:
    """Refine the event query bank against fixed contextualized node rows;
    each layer's output queries feed the next layer's attention."""
    p = queries
    for wq, wk in layer_params:
        keys = T.matmul(feats, wk, tape)
        scores = T.matmul(T.matmul(p, wq, tape), T.transpose(keys, tape), tape)
        alpha = T.softmax_rows(scores, tape)
        trace_rows(trace, "attn.event", alpha)
        p = T.matmul(alpha, feats, tape)
    return p
