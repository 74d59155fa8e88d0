"""Cross-graph interaction, correspondence inference, and interval prediction.

The two complete graphs exchange information level-by-level through gated
cross attention. A row-stochastic correspondence matrix is then inferred
either from the graphs alone (prior) or additionally from the ground-truth
interval (posterior). The likelihood head fuses both graphs under the
correspondence and regresses a normalized (start, end) interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import trace_rows
from .tensor import EngineError, Tape, Tensor


@dataclass
class CorrespondenceMatrix:
    """Row-stochastic alignment between video rows and language rows."""

    z: np.ndarray
    source: str  # "prior" | "posterior" | "uniform"

    def __post_init__(self):
        sums = self.z.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise EngineError(
                f"correspondence matrix rows must sum to 1 (source={self.source})")


def level_mask(levels_a: list[str], levels_b: list[str]) -> np.ndarray:
    """1 where the row's level equals the column's level."""
    la = np.asarray(levels_a)
    lb = np.asarray(levels_b)
    return (la[:, None] == lb[None, :]).astype(np.float32)


def _directed_convolve(src: Tensor, other: Tensor, mask: np.ndarray,
                       wq: Tensor, wk: Tensor, gate_w: Tensor, gate_b: Tensor,
                       tape: Tape | None, trace: dict | None,
                       trace_key: str) -> Tensor:
    scores = T.matmul(T.matmul(src, wq, tape),
                      T.transpose(T.matmul(other, wk, tape), tape), tape)
    alpha = T.masked_softmax_rows(scores, mask, tape)
    trace_rows(trace, trace_key, alpha, mask.sum(axis=1) > 0)
    cross = T.matmul(alpha, other, tape)
    beta = T.sigmoid(T.broadcast_add(T.matmul(src, gate_w, tape), gate_b, tape), tape)
    if trace is not None:
        trace.setdefault("gates", []).append(
            np.asarray(beta.values, dtype=np.float64).copy())
    # rows whose level is empty on the other side pass through ungated
    has_peer = (mask.sum(axis=1) > 0).astype(src.values.dtype)
    indicator = T.const(np.repeat(has_peer[:, None], src.shape[1], axis=1))
    beta = T.mul(beta, indicator, tape)
    keep = T.add_scalar(T.scale(beta, -1.0, tape), 1.0, tape)
    return T.add(T.mul(keep, src, tape), T.mul(beta, cross, tape), tape)


def convolve_graphs(
    m: Tensor, h: Tensor,
    levels_m: list[str], levels_h: list[str],
    params: dict[str, Tensor],
    tape: Tape | None,
    trace: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Bidirectional level-restricted cross attention with sigmoid gates;
    both directions read the original graphs."""
    mask_h2m = level_mask(levels_m, levels_h)
    mt = _directed_convolve(
        m, h, mask_h2m,
        params["cgc.h2m.Wq"], params["cgc.h2m.Wk"],
        params["cgc.h2m.gate.W"], params["cgc.h2m.gate.b"],
        tape, trace, "attn.cross")
    ht = _directed_convolve(
        h, m, mask_h2m.T.copy(),
        params["cgc.m2h.Wq"], params["cgc.m2h.Wk"],
        params["cgc.m2h.gate.W"], params["cgc.m2h.gate.b"],
        tape, trace, "attn.cross")
    return mt, ht


def infer_prior(mt: Tensor, ht: Tensor, q: Tensor, params: dict[str, Tensor],
                tape: Tape | None, trace: dict | None = None) -> Tensor:
    """Row-stochastic correspondence from the graphs and the global query
    feature: score(i, j) = <P m_i, (P_q q) * h_j>, softmax over j."""
    a = T.matmul(mt, params["prior.node_proj"], tape)
    guided = T.broadcast_mul(ht, T.matmul(q, params["prior.guide_proj"], tape), tape)
    z = T.softmax_rows(T.matmul(a, T.transpose(guided, tape), tape), tape)
    trace_rows(trace, "z.prior", z)
    return z


def segments_in_interval(interval: tuple[float, float], n_segments: int) -> tuple[int, int]:
    """Segment index range [lo, hi) overlapping the normalized interval by a
    positive amount; a degenerate interval maps to its containing segment."""
    s, e = interval
    if not (0.0 <= s <= e <= 1.0 + 1e-9):
        raise EngineError(f"interval ({s}, {e}) outside [0, 1]")
    if e - s <= 1e-12:
        t = min(int(s * n_segments), n_segments - 1)
        return t, t + 1
    lo = n_segments
    hi = 0
    for t in range(n_segments):
        a, b = t / n_segments, (t + 1) / n_segments
        if min(b, e) - max(a, s) > 1e-12:
            lo = min(lo, t)
            hi = max(hi, t + 1)
    if hi <= lo:  # interval thinner than float noise: fall back to containment
        t = min(int(s * n_segments), n_segments - 1)
        return t, t + 1
    return lo, hi


def infer_posterior(
    mt: Tensor, ht: Tensor, q: Tensor,
    interval: tuple[float, float],
    node_range_for_segments,
    n_segments: int,
    params: dict[str, Tensor],
    tape: Tape | None,
    trace: dict | None = None,
) -> Tensor:
    """Correspondence additionally guided by the mean feature of the
    action/object nodes inside the ground-truth interval."""
    lo, hi = segments_in_interval(interval, n_segments)
    r0, r1 = node_range_for_segments(lo, hi)
    mstar = T.avg_rows(T.slice_rows(mt, r0, r1, tape), tape)
    a = T.broadcast_mul(mt, T.matmul(mstar, params["posterior.guide_video"], tape), tape)
    guided = T.broadcast_mul(ht, T.matmul(q, params["posterior.guide_query"], tape), tape)
    z = T.softmax_rows(T.matmul(a, T.transpose(guided, tape), tape), tape)
    trace_rows(trace, "z.posterior", z)
    return z


def uniform_correspondence(n_rows: int, n_cols: int) -> Tensor:
    return T.const(np.full((n_rows, n_cols), 1.0 / n_cols, dtype=np.float32))


def positional_encoding(n_segments: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of normalized segment centers, giving the
    regression head a temporal coordinate system."""
    centers = (np.arange(n_segments) + 0.5) / n_segments
    out = np.zeros((n_segments, dim), dtype=np.float32)
    half = dim // 2
    for i in range(half):
        freq = math.pi * (i + 1.0)
        out[:, 2 * i] = np.sin(freq * centers)
        out[:, 2 * i + 1] = np.cos(freq * centers)
    return out


def predict_interval(
    mt: Tensor, ht: Tensor, z: Tensor,
    segment_means: np.ndarray,
    pos_enc: np.ndarray,
    q: Tensor,
    params: dict[str, Tensor],
    heads: int,
    tape: Tape | None,
    trace: dict | None = None,
) -> Tensor:
    """Fuse the graphs under the correspondence, enrich segment features by
    multi-head cross attention, pool them with query-guided weights, and
    regress a center/width pair that always yields 0 <= start <= end <= 1."""
    fused = T.matmul(z, ht, tape)
    joint = T.matmul(T.concat_cols([mt, fused], tape), params["like.joint.W"], tape)

    # segment content plus fixed temporal coordinates
    x = T.add(T.matmul(T.const(segment_means), params["like.seg.W"], tape),
              T.const(pos_enc), tape)

    d = x.shape[1]
    dh = d // heads
    head_outs = []
    for hd in range(heads):
        qh = T.matmul(x, params[f"like.attn.{hd}.Wq"], tape)
        kh = T.matmul(joint, params[f"like.attn.{hd}.Wk"], tape)
        vh = T.matmul(joint, params[f"like.attn.{hd}.Wv"], tape)
        scores = T.scale(T.matmul(qh, T.transpose(kh, tape), tape),
                         1.0 / math.sqrt(dh), tape)
        attn = T.softmax_rows(scores, tape)
        trace_rows(trace, "attn.head", attn)
        head_outs.append(T.matmul(attn, vh, tape))
    x_star = T.add(x, T.matmul(T.concat_cols(head_outs, tape),
                               params["like.attn.Wo"], tape), tape)

    guide = T.matmul(q, params["like.pool.Wq"], tape)
    keys = T.matmul(x_star, params["like.pool.Wk"], tape)
    weights = T.softmax_rows(T.matmul(guide, T.transpose(keys, tape), tape), tape)
    trace_rows(trace, "attn.pool", weights)
    pooled = T.matmul(weights, x_star, tape)

    hidden = T.sigmoid(T.broadcast_add(
        T.matmul(pooled, params["like.head.W1"], tape),
        params["like.head.b1"], tape), tape)
    cw = T.sigmoid(T.broadcast_add(
        T.matmul(hidden, params["like.head.W2"], tape),
        params["like.head.b2"], tape), tape)
    center = T.slice_cols(cw, 0, 1, tape)
    half_w = T.scale(T.slice_cols(cw, 1, 2, tape), 0.5, tape)
    start = T.clamp(T.sub(center, half_w, tape), 0.0, 1.0, tape)
    end = T.clamp(T.add(center, half_w, tape), 0.0, 1.0, tape)
    return T.concat_cols([start, end], tape)
