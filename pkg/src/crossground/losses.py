"""Training objectives.

Three loss families combine into the full objective:
  * alignment ELBO: interval regression plus row-wise KL between the
    posterior and prior correspondence matrices;
  * structure-informed semantics: masked-node label prediction plus a
    consistency KL against sharpened relationship distributions from a
    slow-moving target network;
  * semantic-adaptive margin: a hinge ranking loss over in-batch negatives
    whose margin grows with the measured graph overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import EngineError, Tape, Tensor


class LossError(Exception):
    pass


@dataclass
class MarginConfig:
    base_margin: float = 0.4
    curve: float = 10.0

    def __post_init__(self):
        if self.base_margin <= 0:
            raise LossError(f"base margin must be positive, got {self.base_margin}")
        if self.curve <= 1:
            raise LossError(f"curve parameter must exceed 1, got {self.curve}")


@dataclass
class LossReport:
    """Scalar components of one training step (batch-level means)."""

    regression: float
    kl: float
    msm: float
    sc: float
    sam: float
    sism_lambda: float

    @property
    def elbo(self) -> float:
        return self.regression + self.kl

    @property
    def sism(self) -> float:
        return (1.0 - self.sism_lambda) * self.msm + self.sism_lambda * self.sc

    @property
    def total(self) -> float:
        return self.elbo + self.sism + self.sam

    def validate(self) -> "LossReport":
        parts = {"regression": self.regression, "kl": self.kl, "msm": self.msm,
                 "sc": self.sc, "sam": self.sam}
        for name, v in parts.items():
            if not np.isfinite(v):
                raise LossError(f"loss component {name} is not finite")
            if v < -1e-6:
                raise LossError(f"loss component {name} is negative: {v}")
        return self

    def as_dict(self) -> dict[str, float]:
        return {"regression": self.regression, "kl": self.kl,
                "elbo": self.elbo, "msm": self.msm, "sc": self.sc,
                "sism": self.sism, "sam": self.sam, "total": self.total}


# ---------------------------------------------------------------------------
# ELBO

def elbo_loss(pred: Tensor, gt: Tensor, z_post: Tensor | None,
              z_prior: Tensor | None, tape: Tape | None) -> tuple[Tensor, Tensor, Tensor]:
    """Regression (Huber) term plus row-wise KL(posterior || prior).

    Returns (loss, regression_term, kl_term); the KL term is zero when the
    correspondence pair is absent (ablated variational path).
    """
    reg = T.smooth_l1(pred, gt, tape)
    if z_post is None or z_prior is None:
        zero = T.const(np.zeros((1, 1), dtype=pred.values.dtype))
        return reg, reg, zero
    if z_post.shape != z_prior.shape:
        raise T.ShapeError(
            f"elbo_loss: correspondence shapes {z_post.shape} vs {z_prior.shape}")
    kl = T.kl_rows(z_post, z_prior, tape)
    return T.add(reg, kl, tape), reg, kl


# ---------------------------------------------------------------------------
# masked semantics

def msm_loss(masked_feats: Tensor | None, label_ids: np.ndarray,
             classifier_w: Tensor, classifier_b: Tensor,
             tape: Tape | None) -> Tensor:
    """Mean negative log-likelihood of the original labels of masked nodes;
    an empty mask set contributes zero."""
    if masked_feats is None or masked_feats.shape[0] == 0 or label_ids.size == 0:
        return T.const(np.zeros((1, 1), dtype=np.float32))
    logits = T.broadcast_add(T.matmul(masked_feats, classifier_w, tape),
                             classifier_b, tape)
    return T.cross_entropy_mean(logits, label_ids, tape)


def relationship_rows(masked_feats: Tensor, all_feats: Tensor,
                      tape: Tape | None, trace: dict | None = None) -> Tensor:
    """Softmax over dot products of each masked node against every node of
    the complete graph (own slot included)."""
    scores = T.matmul(masked_feats, T.transpose(all_feats, tape), tape)
    rows = T.softmax_rows(scores, tape)
    if trace is not None:
        trace.setdefault("relationship_rows", []).append(
            np.asarray(rows.values, dtype=np.float64).copy())
    return rows


def sharpen(p: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-sharpen probability rows: p^(1/tau), renormalized."""
    if tau <= 0:
        raise LossError(f"sharpen: temperature must be positive, got {tau}")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(p < -1e-9):
        raise LossError("sharpen: input rows must be probability distributions")
    powed = np.power(np.maximum(p, 0.0), 1.0 / tau)
    return powed / powed.sum(axis=1, keepdims=True)


def structure_consistency_loss(target_rows: np.ndarray, online_rows: Tensor,
                               tape: Tape | None) -> Tensor:
    """Mean row-wise KL from detached (sharpened) target rows to the online
    rows; gradient reaches the online side only."""
    if target_rows.shape != online_rows.shape:
        raise T.ShapeError(
            f"structure_consistency_loss: {target_rows.shape} vs {online_rows.shape}")
    frozen = T.const(np.asarray(target_rows, dtype=online_rows.values.dtype))
    return T.kl_rows(frozen, online_rows, tape)


def sism_loss(l_msm: Tensor, l_sc: Tensor, lam: float, tape: Tape | None) -> Tensor:
    """Weighted combination (1-lambda)*msm + lambda*sc."""
    if not (0.0 <= lam <= 1.0):
        raise LossError(f"sism_loss: lambda {lam} outside [0, 1]")
    return T.add(T.scale(l_msm, 1.0 - lam, tape), T.scale(l_sc, lam, tape), tape)


# ---------------------------------------------------------------------------
# EMA target network

@dataclass
class TargetNetwork:
    """Slow-moving copy of the online parameters; never receives gradients."""

    params: dict[str, Tensor]
    decay: float

    @classmethod
    def from_online(cls, online: dict[str, Tensor], decay: float) -> "TargetNetwork":
        frozen = {k: Tensor(p.values.copy(), requires_grad=False, dtype=p.dtype)
                  for k, p in online.items()}
        return cls(params=frozen, decay=decay)


def ema_update(target: TargetNetwork, online: dict[str, Tensor]) -> TargetNetwork:
    """In-place exponential moving average: xi <- w*xi + (1-w)*theta."""
    w = target.decay
    for name, p in online.items():
        tp = target.params[name]
        if tp.values.shape != p.values.shape:
            raise T.ShapeError(f"ema_update: shape mismatch for {name}")
        tp.values[...] = w * tp.values + (1.0 - w) * p.values
    return target


# ---------------------------------------------------------------------------
# semantic adaptation and adaptive margin

def adapt_graphs(m: Tensor, h: Tensor, w_video: Tensor, w_language: Tensor,
                 tape: Tape | None) -> tuple[Tensor, Tensor]:
    """Linear per-row adaptation maps applied to both graphs."""
    return T.matmul(m, w_video, tape), T.matmul(h, w_language, tape)


def semantic_overlap(z) -> float:
    """Mean over rows of the row maximum of a row-stochastic matrix."""
    vals = z.values if isinstance(z, Tensor) else np.asarray(z)
    sums = vals.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise EngineError("semantic_overlap: matrix rows must sum to 1")
    return float(vals.max(axis=1).mean())


def soft_margin(overlap: float, cfg: MarginConfig) -> float:
    """Margin grows with overlap along (u^z - 1) / (u - 1), scaled to the
    base margin; 0 at z=0, the full base margin at z=1."""
    if not (0.0 <= overlap <= 1.0):
        raise LossError(f"soft_margin: overlap {overlap} outside [0, 1]")
    u = cfg.curve
    return (u ** overlap - 1.0) / (u - 1.0) * cfg.base_margin


def _cosine(a: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    dot = T.sum_all(T.mul(a, b, tape), tape)
    na = T.sqrt(T.add_scalar(T.sum_all(T.mul(a, a, tape), tape), 1e-12, tape), tape)
    nb = T.sqrt(T.add_scalar(T.sum_all(T.mul(b, b, tape), tape), 1e-12, tape), tape)
    return T.div(dot, T.mul(na, nb, tape), tape)


@dataclass
class SamItem:
    """One batch element's pooled-graph inputs to the margin loss."""

    video_pool: Tensor      # (1, d) mean over video graph rows
    language_pool: Tensor   # (1, d)
    overlap: float          # semantic overlap of its correspondence matrix
    margins_used: list[float] = field(default_factory=list)


def sam_loss(items: list[SamItem], cfg: MarginConfig, rng: np.random.Generator,
             tape: Tape | None) -> Tensor:
    """Hinge ranking against one sampled negative video and one sampled
    negative language graph per pair; batches of size one contribute zero."""
    if len(items) < 2:
        return T.const(np.zeros((1, 1), dtype=np.float32))
    terms = []
    n = len(items)
    for i, item in enumerate(items):
        eta = soft_margin(item.overlap, cfg)
        item.margins_used.append(eta)
        pos = _cosine(item.video_pool, item.language_pool, tape)
        j = int(rng.integers(n - 1))
        j = j if j < i else j + 1
        k = int(rng.integers(n - 1))
        k = k if k < i else k + 1
        neg_lang = _cosine(item.video_pool, items[j].language_pool, tape)
        neg_video = _cosine(items[k].video_pool, item.language_pool, tape)
        for neg in (neg_lang, neg_video):
            hinge = T.relu(T.add_scalar(T.sub(neg, pos, tape), eta, tape), tape)
            terms.append(hinge)
    acc = terms[0]
    for t_ in terms[1:]:
        acc = T.add(acc, t_, tape)
    return T.scale(acc, 1.0 / n, tape)


def total_loss(elbo: Tensor, sism: Tensor, sam: Tensor, tape: Tape | None) -> Tensor:
    """Plain sum of the three components."""
    return T.add(T.add(elbo, sism, tape), sam, tape)
