"""Full grounding model: graph encoding, correspondence, prediction, losses.

Holds the named parameter dictionary and wires the encoder, cross-graph,
and objective stages into per-pair forwards and batch losses. Every stage
can be switched off independently for ablations; switched-off stages keep
their parameters (they simply receive no gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import crossgraph as X
from . import encoders as E
from . import losses as L
from . import tensor as T
from .config import RunConfig
from .graphs import (
    KIND_EVENT,
    EmbeddingTable,
    HierarchicalSemanticGraph,
    QueryAnnotation,
    VideoAnnotation,
    build_language_graph,
    build_video_graph,
    mask_nodes,
    relation_masks,
    wire_edges,
)
from .tensor import Tape, Tensor


class ModelError(Exception):
    pass


@dataclass
class VideoContext:
    """Precomputed constants for one annotated video."""

    ann: VideoAnnotation
    graph: HierarchicalSemanticGraph
    rel_masks: dict[str, np.ndarray]
    features: Tensor                      # (N_v, d_w) unmasked label embeddings
    segment_blocks: list[E.SegmentBlock]
    node_ranges: list[tuple[int, int]]    # node-row span per segment
    segment_means: np.ndarray             # (T, D_f)
    pos_enc: np.ndarray                   # (T, d)
    levels: list[str]                     # per node, before events

    @property
    def n_segments(self) -> int:
        return len(self.ann.segments)

    def node_range_for_segments(self, lo: int, hi: int) -> tuple[int, int]:
        return self.node_ranges[lo][0], self.node_ranges[hi - 1][1]


@dataclass
class QueryContext:
    """Precomputed constants for one annotated query."""

    ann: QueryAnnotation
    graph: HierarchicalSemanticGraph
    rel_masks: dict[str, np.ndarray]
    features: Tensor
    levels: list[str]
    interval: tuple[float, float]         # normalized
    gt: Tensor                            # (1, 2) constant


@dataclass
class ForwardOut:
    pred: Tensor
    z_prior: Tensor | None
    z_post: Tensor | None
    z_used_values: np.ndarray
    m_in: Tensor                          # complete video graph fed to cross stage
    h_in: Tensor


@dataclass
class BatchOut:
    total: Tensor
    report: L.LossReport


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)


class Model:
    def __init__(self, cfg: RunConfig, table: EmbeddingTable,
                 label_vocab: list[str]):
        if not label_vocab:
            raise ModelError("label vocabulary is empty")
        if cfg.word_dim != table.dim:
            raise ModelError(
                f"config word_dim {cfg.word_dim} != embedding table width {table.dim}")
        self.cfg = cfg
        self.table = table
        self.label_vocab = sorted(set(label_vocab))
        self.label_to_id = {w: i for i, w in enumerate(self.label_vocab)}
        self.params = self._init_params(np.random.default_rng([cfg.seed, 11]))

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.cfg
        d, dw, df = cfg.node_dim, cfg.word_dim, cfg.frame_dim
        dh = d // cfg.attn_heads
        vocab = len(self.label_vocab)

        def p(name, arr):
            params[name] = Tensor(arr, requires_grad=True)

        params: dict[str, Tensor] = {}
        p("input.project", _glorot(rng, dw, d))
        for side in ("video", "language"):
            for layer in range(cfg.scl_layers):
                for rel in ("action-action", "action-object", "object-object"):
                    p(f"scl.{side}.{layer}.{rel}.W", _glorot(rng, d, d))
                    p(f"scl.{side}.{layer}.{rel}.U", _glorot(rng, d, d))
        p("vcl.gate.W", _glorot(rng, d + 2 * df, df))
        p("vcl.gate.b", np.zeros((1, df), dtype=np.float32))
        p("vcl.fuse.W", _glorot(rng, d + df, d))
        for side in ("video", "language"):
            p(f"hsa.{side}.queries",
              (rng.standard_normal((cfg.event_queries, d)) / np.sqrt(d)).astype(np.float32))
            for layer in range(cfg.hsa_layers):
                p(f"hsa.{side}.{layer}.Wq", _glorot(rng, d, d))
                p(f"hsa.{side}.{layer}.Wk", _glorot(rng, d, d))
        for side in ("video", "language"):
            near_identity = np.eye(d, dtype=np.float32) + 0.02 * _glorot(rng, d, d)
            p(f"adapt.{side}.W", near_identity)
        for direction in ("h2m", "m2h"):
            p(f"cgc.{direction}.Wq", _glorot(rng, d, d))
            p(f"cgc.{direction}.Wk", _glorot(rng, d, d))
            p(f"cgc.{direction}.gate.W", _glorot(rng, d, d))
            p(f"cgc.{direction}.gate.b", np.zeros((1, d), dtype=np.float32))
        p("prior.node_proj", _glorot(rng, d, d))
        p("prior.guide_proj", _glorot(rng, d, d))
        p("posterior.guide_video", _glorot(rng, d, d))
        p("posterior.guide_query", _glorot(rng, d, d))
        p("like.joint.W", _glorot(rng, 2 * d, d))
        p("like.seg.W", _glorot(rng, df, d))
        for head in range(cfg.attn_heads):
            p(f"like.attn.{head}.Wq", _glorot(rng, d, dh))
            p(f"like.attn.{head}.Wk", _glorot(rng, d, dh))
            p(f"like.attn.{head}.Wv", _glorot(rng, d, dh))
        p("like.attn.Wo", _glorot(rng, d, d))
        p("like.pool.Wq", _glorot(rng, d, d))
        p("like.pool.Wk", _glorot(rng, d, d))
        p("like.head.W1", _glorot(rng, d, d))
        p("like.head.b1", np.zeros((1, d), dtype=np.float32))
        p("like.head.W2", _glorot(rng, d, 2))
        p("like.head.b2", np.zeros((1, 2), dtype=np.float32))
        p("msm.W", _glorot(rng, d, vocab))
        p("msm.b", np.zeros((1, vocab), dtype=np.float32))
        return params

    def zero_grads(self) -> None:
        for p_ in self.params.values():
            p_.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p_ in self.params.items():
            p_.ensure_grad()
            out[name] = p_.grad
        return out

    # ------------------------------------------------------------------
    # contexts

    def video_context(self, ann: VideoAnnotation) -> VideoContext:
        cfg = self.cfg
        if ann.frame_dim != cfg.frame_dim:
            raise ModelError(
                f"video {ann.video_id}: frame width {ann.frame_dim} != config "
                f"frame_dim {cfg.frame_dim}")
        graph = wire_edges(build_video_graph(
            ann, self.table, cfg.actions_per_segment, cfg.objects_per_segment))
        blocks = E.build_segment_blocks(
            graph, [seg.frames for seg in ann.segments])
        ranges = [(b.node_start, b.node_end) for b in blocks]
        means = np.stack([seg.frames.mean(axis=0) for seg in ann.segments]).astype(np.float32)
        return VideoContext(
            ann=ann, graph=graph, rel_masks=relation_masks(graph),
            features=T.const(graph.feature_matrix()),
            segment_blocks=blocks, node_ranges=ranges, segment_means=means,
            pos_enc=X.positional_encoding(len(ann.segments), cfg.node_dim),
            levels=graph.kinds)

    def query_context(self, q: QueryAnnotation, duration: float) -> QueryContext:
        graph = wire_edges(build_language_graph(q, self.table))
        interval = q.normalized_interval(duration)
        return QueryContext(
            ann=q, graph=graph, rel_masks=relation_masks(graph),
            features=T.const(graph.feature_matrix()),
            levels=graph.kinds, interval=interval,
            gt=T.const(np.array([interval], dtype=np.float32)))

    # ------------------------------------------------------------------
    # forward passes

    def _scl_params(self, side: str, params: dict[str, Tensor]):
        return [
            {rel: (params[f"scl.{side}.{layer}.{rel}.W"],
                   params[f"scl.{side}.{layer}.{rel}.U"])
             for rel in ("action-action", "action-object", "object-object")}
            for layer in range(self.cfg.scl_layers)
        ]

    def _hsa_params(self, side: str, params: dict[str, Tensor]):
        return [(params[f"hsa.{side}.{layer}.Wq"], params[f"hsa.{side}.{layer}.Wk"])
                for layer in range(self.cfg.hsa_layers)]

    def encode_video(self, vctx: VideoContext, params: dict[str, Tensor] | None,
                     tape: Tape | None, features: Tensor | None = None,
                     rel_masks: dict | None = None,
                     trace: dict | None = None) -> tuple[Tensor, Tensor, list[str]]:
        """Project, contextualize, and complete the video graph.

        Returns (node rows, complete graph with events appended, levels).
        """
        cfg = self.cfg
        params = params or self.params
        feats = features if features is not None else vctx.features
        s = T.matmul(feats, params["input.project"], tape)
        if cfg.use_scl:
            s = E.contextualize_semantics(
                s, rel_masks or vctx.rel_masks,
                self._scl_params("video", params), tape, trace)
        if cfg.use_vcl:
            s = E.contextualize_visual(
                s, vctx.segment_blocks, params["vcl.gate.W"],
                params["vcl.gate.b"], params["vcl.fuse.W"], tape, trace)
        levels = list(vctx.levels)
        if cfg.use_hsa:
            events = E.aggregate_events(
                s, params["hsa.video.queries"],
                self._hsa_params("video", params), tape, trace)
            full = T.concat_rows([s, events], tape)
            levels = levels + [KIND_EVENT] * cfg.event_queries
        else:
            full = s
        return s, full, levels

    def encode_query(self, qctx: QueryContext, params: dict[str, Tensor] | None,
                     tape: Tape | None,
                     trace: dict | None = None) -> tuple[Tensor, Tensor, list[str]]:
        cfg = self.cfg
        params = params or self.params
        c = T.matmul(qctx.features, params["input.project"], tape)
        if cfg.use_scl:
            c = E.contextualize_semantics(
                c, qctx.rel_masks, self._scl_params("language", params), tape, trace)
        levels = list(qctx.levels)
        if cfg.use_hsa:
            events = E.aggregate_events(
                c, params["hsa.language.queries"],
                self._hsa_params("language", params), tape, trace)
            full = T.concat_rows([c, events], tape)
            levels = levels + [KIND_EVENT] * cfg.event_queries
        else:
            full = c
        return c, full, levels

    def forward_pair(self, vctx: VideoContext, qctx: QueryContext,
                     params: dict[str, Tensor] | None = None,
                     tape: Tape | None = None, training: bool = False,
                     trace: dict | None = None) -> ForwardOut:
        cfg = self.cfg
        params = params or self.params
        _, m_full, levels_m = self.encode_video(vctx, params, tape, trace=trace)
        _, h_full, levels_h = self.encode_query(qctx, params, tape, trace=trace)

        if cfg.use_sam:
            m_in, h_in = L.adapt_graphs(
                m_full, h_full, params["adapt.video.W"],
                params["adapt.language.W"], tape)
        else:
            m_in, h_in = m_full, h_full

        n_ao = sum(1 for lv in qctx.levels if lv != KIND_EVENT)
        q = T.avg_rows(T.slice_rows(h_in, 0, n_ao, tape), tape)

        mt, ht = X.convolve_graphs(m_in, h_in, levels_m, levels_h, params, tape, trace)

        z_prior = z_post = None
        if cfg.use_vcc:
            z_prior = X.infer_prior(mt, ht, q, params, tape, trace)
            if training:
                z_post = X.infer_posterior(
                    mt, ht, q, qctx.interval, vctx.node_range_for_segments,
                    vctx.n_segments, params, tape, trace)
            z_used = z_post if training else z_prior
        else:
            z_used = X.uniform_correspondence(m_in.shape[0], h_in.shape[0])

        pred = X.predict_interval(
            mt, ht, z_used, vctx.segment_means, vctx.pos_enc, q,
            params, cfg.attn_heads, tape, trace)
        return ForwardOut(pred=pred, z_prior=z_prior, z_post=z_post,
                          z_used_values=np.asarray(z_used.values, dtype=np.float64),
                          m_in=m_in, h_in=h_in)

    def predict(self, vctx: VideoContext, qctx: QueryContext) -> tuple[float, float]:
        """Inference-path interval prediction (prior correspondence)."""
        out = self.forward_pair(vctx, qctx, training=False, tape=None)
        s, e = out.pred.values[0]
        return float(s), float(e)

    def prior_correspondence(self, vctx: VideoContext,
                             qctx: QueryContext) -> X.CorrespondenceMatrix:
        if not self.cfg.use_vcc:
            raise ModelError("correspondence inference is switched off (use_vcc)")
        out = self.forward_pair(vctx, qctx, training=False, tape=None)
        return X.CorrespondenceMatrix(out.z_used_values, "prior")

    # ------------------------------------------------------------------
    # masked-node objective paths

    def masked_rows(self, vctx: VideoContext,
                    masked_graph: HierarchicalSemanticGraph,
                    indices: list[int], params: dict[str, Tensor],
                    tape: Tape | None,
                    trace: dict | None = None) -> tuple[Tensor, Tensor]:
        """Encode the masked video graph; return (masked node rows, complete
        graph rows)."""
        feats = T.const(masked_graph.feature_matrix())
        _, full, _ = self.encode_video(vctx, params, tape, features=feats,
                                       trace=trace)
        rows = T.concat_rows(
            [T.slice_rows(full, i, i + 1, tape) for i in indices], tape)
        return rows, full

    def label_ids(self, labels: list[str]) -> np.ndarray:
        missing = [w for w in labels if w not in self.label_to_id]
        if missing:
            raise ModelError(f"label outside vocabulary: '{missing[0]}'")
        return np.array([self.label_to_id[w] for w in labels], dtype=np.int64)

    # ------------------------------------------------------------------
    # batch objective

    def effective_lambda(self) -> float:
        cfg = self.cfg
        if cfg.use_msm and cfg.use_sc:
            return cfg.sism_lambda
        if cfg.use_sc:
            return 1.0
        return 0.0

    def batch_losses(self, items: list[tuple[VideoContext, QueryContext]],
                     tape: Tape, target: L.TargetNetwork | None,
                     mask_rng: np.random.Generator,
                     neg_rng: np.random.Generator,
                     trace: dict | None = None,
                     params: dict[str, Tensor] | None = None) -> BatchOut:
        cfg = self.cfg
        params = params or self.params
        if not items:
            raise ModelError("empty batch")
        zero = lambda: T.const(np.zeros((1, 1), dtype=np.float32))

        elbo_terms, reg_terms, kl_terms = [], [], []
        msm_terms, sc_terms = [], []
        sam_items: list[L.SamItem] = []
        for vctx, qctx in items:
            out = self.forward_pair(vctx, qctx, params=params, tape=tape,
                                    training=True, trace=trace)
            loss_i, reg_i, kl_i = L.elbo_loss(
                out.pred, qctx.gt, out.z_post, out.z_prior, tape)
            elbo_terms.append(loss_i)
            reg_terms.append(reg_i.item())
            kl_terms.append(kl_i.item())

            if cfg.use_msm or cfg.use_sc:
                seed = int(mask_rng.integers(2 ** 31 - 1))
                masked_graph, record = mask_nodes(
                    vctx.graph, cfg.mask_prob, seed, self.table)
                if record.indices:
                    rows, _full = self.masked_rows(
                        vctx, masked_graph, record.indices, params, tape,
                        trace)
                    if cfg.use_msm:
                        msm_terms.append(L.msm_loss(
                            rows, self.label_ids(record.original_labels),
                            params["msm.W"], params["msm.b"], tape))
                    if cfg.use_sc and target is not None:
                        t_rows, t_full = self.masked_rows(
                            vctx, masked_graph, record.indices,
                            target.params, None)
                        p_target = L.relationship_rows(t_rows, t_full, None).values
                        sharpened = L.sharpen(p_target, cfg.sharpen_tau)
                        p_online = L.relationship_rows(rows, _full, tape, trace)
                        sc_terms.append(L.structure_consistency_loss(
                            sharpened, p_online, tape))

            if cfg.use_sam:
                sam_items.append(L.SamItem(
                    video_pool=T.avg_rows(out.m_in, tape),
                    language_pool=T.avg_rows(out.h_in, tape),
                    overlap=L.semantic_overlap(out.z_used_values)))

        def mean_of(terms):
            if not terms:
                return zero()
            acc = terms[0]
            for t_ in terms[1:]:
                acc = T.add(acc, t_, tape)
            return T.scale(acc, 1.0 / len(terms), tape)

        elbo = mean_of(elbo_terms)
        msm = mean_of(msm_terms) if cfg.use_msm else zero()
        sc = mean_of(sc_terms) if cfg.use_sc else zero()
        lam = self.effective_lambda()
        sism = L.sism_loss(msm, sc, lam, tape) if (cfg.use_msm or cfg.use_sc) else zero()
        sam = (L.sam_loss(sam_items, L.MarginConfig(cfg.base_margin, cfg.margin_curve),
                          neg_rng, tape) if cfg.use_sam else zero())
        total = L.total_loss(elbo, sism, sam, tape)
        report = L.LossReport(
            regression=float(np.mean(reg_terms)),
            kl=float(np.mean(kl_terms)),
            msm=msm.item(), sc=sc.item(), sam=sam.item(),
            sism_lambda=lam).validate()
        return BatchOut(total=total, report=report)
