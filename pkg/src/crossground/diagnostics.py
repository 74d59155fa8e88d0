"""End-to-end gradient verification and invariant sweeps over the model.

Complements the per-primitive checks in `gradcheck` with a tiny-instance
model whose full training loss is differentiated and compared against
central finite differences at sampled parameter coordinates, plus a sweep
that instantiates random models and checks every runtime contract
(row-stochastic attention, gate ranges, interval ordering).
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .config import RunConfig
from .gradcheck import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    STATUS_FAILED,
    STATUS_PASSED,
    CheckResult,
)
from .graphs import (
    EmbeddingTable,
    QueryAnnotation,
    QueryStructure,
    Segment,
    VideoAnnotation,
)
from .model import Model
from .tensor import Tape, Tensor


def tiny_config(seed: int) -> RunConfig:
    return RunConfig(
        node_dim=8, word_dim=6, frame_dim=5, frames_per_segment=2,
        actions_per_segment=1, objects_per_segment=2, event_queries=1,
        scl_layers=1, hsa_layers=1, attn_heads=2, mask_prob=0.6,
        batch_size=2, epochs=1, seed=seed).validate()


def _tiny_world(seed: int, cfg: RunConfig, n_videos: int = 2,
                n_segments: int = 2):
    rng = np.random.default_rng([seed, 5])
    words = ["run", "jump", "ball", "dog", "rope"]
    videos, queries = [], []
    for v in range(n_videos):
        segs = []
        for _ in range(n_segments):
            segs.append(Segment(
                frames=rng.standard_normal(
                    (cfg.frames_per_segment, cfg.frame_dim)).astype(np.float32),
                actions=[(words[rng.integers(2)], float(rng.uniform(0.6, 1.0)))],
                objects=[(words[2 + rng.integers(3)], float(rng.uniform(0.6, 1.0))),
                         (words[2 + rng.integers(3)], float(rng.uniform(0.2, 0.6)))]))
        duration = 4.0 * n_segments
        videos.append(VideoAnnotation(f"v{v}", duration, segs))
        start = float(rng.integers(n_segments)) * 4.0
        queries.append(QueryAnnotation(
            f"q{v}", f"v{v}",
            [QueryStructure(words[rng.integers(2)], [words[2 + rng.integers(3)]])],
            ["a", "b"], (start, start + 4.0)))
    return videos, queries


def build_tiny_model(seed: int, dtype=np.float64):
    """A complete model over a two-video world, parameters cast to `dtype`."""
    cfg = tiny_config(seed)
    table = EmbeddingTable(dim=cfg.word_dim)
    videos, queries = _tiny_world(seed, cfg)
    vocab = sorted({lbl for v in videos for s in v.segments
                    for lbl, _ in s.actions + s.objects} | {"[unk]"})
    model = Model(cfg, table, vocab)
    if dtype is not np.float32:
        model.params = {
            k: Tensor(p.values.astype(dtype), requires_grad=True, dtype=dtype)
            for k, p in model.params.items()}
    items = [(model.video_context(v), model.query_context(q, v.duration))
             for v, q in zip(videos, queries)]
    target = L.TargetNetwork.from_online(model.params, cfg.ema_decay)
    return model, items, target


def tiny_model_fd_check(seed: int, entries_per_param: int = 2,
                        h: float = 1e-4, rtol: float = DEFAULT_RTOL,
                        atol: float = DEFAULT_ATOL) -> CheckResult:
    """Differentiate the full training loss of the tiny instance and compare
    sampled parameter coordinates against central finite differences."""
    model, items, target = build_tiny_model(seed, dtype=np.float64)
    pick = np.random.default_rng([seed, 13])

    def total_loss_value(with_tape: bool):
        tape = Tape()
        out = model.batch_losses(
            items, tape, target,
            mask_rng=np.random.default_rng([seed, 1]),
            neg_rng=np.random.default_rng([seed, 2]))
        return out.total, tape

    model.zero_grads()
    total, tape = total_loss_value(True)
    T.backward(total, tape)

    worst = 0.0
    for name, p in model.params.items():
        flat = p.values.reshape(-1)
        count = min(entries_per_param, flat.size)
        idxs = pick.choice(flat.size, size=count, replace=False)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + h
            up = total_loss_value(False)[0].item()
            flat[j] = orig - h
            down = total_loss_value(False)[0].item()
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            analytic = float(p.grad.reshape(-1)[j])
            denom = max(abs(analytic), abs(fd), atol / rtol)
            worst = max(worst, abs(analytic - fd) / denom)
    status = STATUS_PASSED if worst <= rtol else STATUS_FAILED
    return CheckResult(op=f"tiny-model[seed={seed}]", status=status,
                       max_rel_err=worst)


ROW_STOCHASTIC_KEYS = ("attn.semantic", "attn.event", "attn.cross",
                       "attn.head", "attn.pool", "z.prior", "z.posterior",
                       "relationship_rows")


def invariant_sweep(n_instances: int = 100, seed: int = 0) -> list[str]:
    """Instantiate random tiny models/batches and return a list of contract
    violations (empty when everything holds)."""
    violations: list[str] = []
    for i in range(n_instances):
        inst_seed = seed * 100003 + i
        model, items, target = build_tiny_model(inst_seed, dtype=np.float32)
        trace: dict = {}
        tape = Tape()
        out = model.batch_losses(
            items, tape, target,
            mask_rng=np.random.default_rng([inst_seed, 1]),
            neg_rng=np.random.default_rng([inst_seed, 2]),
            trace=trace)
        for key in ROW_STOCHASTIC_KEYS:
            for rows in trace.get(key, []):
                err = np.max(np.abs(rows.sum(axis=1) - 1.0))
                if err > 1e-6:
                    violations.append(f"[{i}] {key}: row sum off by {err:.2e}")
        for gates in trace.get("gates", []):
            if not (np.all(gates > 0.0) and np.all(gates < 1.0)):
                violations.append(f"[{i}] gate outside (0, 1)")
        for vctx, qctx in items:
            s, e = model.predict(vctx, qctx)
            if not (0.0 <= s <= e <= 1.0):
                violations.append(f"[{i}] interval ({s}, {e}) not ordered in [0, 1]")
        # sharpening entropy never increases for tau < 1
        rng = np.random.default_rng([inst_seed, 3])
        p = rng.dirichlet(np.ones(6))
        sharp = L.sharpen(p, 0.5)[0]
        h0 = -np.sum(p * np.log(np.maximum(p, 1e-300)))
        h1 = -np.sum(sharp * np.log(np.maximum(sharp, 1e-300)))
        if h1 > h0 + 1e-9:
            violations.append(f"[{i}] sharpening raised entropy")
    return violations
