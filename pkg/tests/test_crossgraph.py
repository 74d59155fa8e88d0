"""Cross-graph convolution, correspondence inference, and prediction head."""

import numpy as np
import pytest

from crossground import crossgraph as X
from crossground import tensor as T
from crossground.gradcheck import finite_difference_check


def t(values, grad=False, dtype=None):
    return T.Tensor(values, requires_grad=grad, dtype=dtype)


def cgc_params(d, rng=None, gate_bias=0.0, gate_w_scale=1.0):
    rng = rng or np.random.default_rng(0)
    p = {}
    for direction in ("h2m", "m2h"):
        p[f"cgc.{direction}.Wq"] = t(rng.standard_normal((d, d)) * 0.5)
        p[f"cgc.{direction}.Wk"] = t(rng.standard_normal((d, d)) * 0.5)
        p[f"cgc.{direction}.gate.W"] = t(rng.standard_normal((d, d)) * gate_w_scale)
        p[f"cgc.{direction}.gate.b"] = t(np.full((1, d), gate_bias, dtype=np.float32))
    return p


class TestConvolveGraphs:
    def test_closed_gate_passes_source_through(self):
        rng = np.random.default_rng(1)
        d = 4
        m = t(rng.standard_normal((5, d)))
        h = t(rng.standard_normal((3, d)))
        params = cgc_params(d, rng, gate_bias=-10.0, gate_w_scale=0.0)
        mt, ht = X.convolve_graphs(m, h, ["action"] * 5, ["action"] * 3, params, None)
        assert np.max(np.abs(mt.values - m.values)) <= 1e-3
        assert np.max(np.abs(ht.values - h.values)) <= 1e-3

    def test_identical_peers_give_exact_convex_blend(self):
        rng = np.random.default_rng(2)
        d = 3
        hrow = rng.standard_normal((1, d)).astype(np.float32)
        h = t(np.repeat(hrow, 4, axis=0))
        m = t(rng.standard_normal((2, d)))
        params = cgc_params(d, rng)
        trace = {}
        mt, _ = X.convolve_graphs(m, h, ["object"] * 2, ["object"] * 4, params,
                                  None, trace)
        beta = trace["gates"][0]
        expected = (1.0 - beta) * m.values + beta * hrow
        assert np.allclose(mt.values, expected, atol=1e-5)

    def test_levels_never_mix(self):
        rng = np.random.default_rng(3)
        d = 4
        levels_m = ["event", "action", "object"]
        levels_h = ["action", "object", "event"]
        mask = X.level_mask(levels_m, levels_h)
        assert mask.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0]]
        m = t(rng.standard_normal((3, d)))
        h = t(rng.standard_normal((3, d)))
        trace = {}
        X.convolve_graphs(m, h, levels_m, levels_h, cgc_params(d, rng), None, trace)
        for rows in trace["attn.cross"]:
            assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-6)

    def test_empty_level_passes_through_ungated(self):
        rng = np.random.default_rng(4)
        d = 3
        m = t(rng.standard_normal((2, d)))
        h = t(rng.standard_normal((2, d)))
        # video has an event row but language has none
        mt, _ = X.convolve_graphs(m, h, ["event", "action"], ["action", "action"],
                                  cgc_params(d, rng), None)
        assert np.allclose(mt.values[0], m.values[0], atol=1e-7)
        assert not np.allclose(mt.values[1], m.values[1], atol=1e-4)


class TestPrior:
    def test_identical_language_rows_give_uniform_correspondence(self):
        rng = np.random.default_rng(5)
        d = 4
        ht = t(np.repeat(rng.standard_normal((1, d)), 4, axis=0))
        mt = t(rng.standard_normal((6, d)))
        q = t(rng.standard_normal((1, d)))
        params = {"prior.node_proj": t(rng.standard_normal((d, d))),
                  "prior.guide_proj": t(rng.standard_normal((d, d)))}
        z = X.infer_prior(mt, ht, q, params, None)
        assert np.allclose(z.values, 0.25, atol=1e-6)

    def test_shape_contract(self):
        rng = np.random.default_rng(6)
        d = 3
        params = {"prior.node_proj": t(rng.standard_normal((d, d))),
                  "prior.guide_proj": t(rng.standard_normal((d, d)))}
        z = X.infer_prior(t(rng.standard_normal((6, d))), t(rng.standard_normal((4, d))),
                          t(rng.standard_normal((1, d))), params, None)
        assert z.shape == (6, 4)
        X.CorrespondenceMatrix(np.asarray(z.values, dtype=np.float64), "prior")

    def test_differentiable(self):
        rng = np.random.default_rng(7)
        d = 3

        def fn(mt, ht, q, w1, w2, tape):
            return X.infer_prior(mt, ht, q,
                                 {"prior.node_proj": w1, "prior.guide_proj": w2}, tape)

        r = finite_difference_check(
            fn, [rng.standard_normal((3, d)), rng.standard_normal((2, d)),
                 rng.standard_normal((1, d)),
                 rng.standard_normal((d, d)) * 0.5, rng.standard_normal((d, d)) * 0.5],
            name="infer_prior")
        assert r.passed, r


class TestSegmentsInInterval:
    def test_whole_video(self):
        assert X.segments_in_interval((0.0, 1.0), 4) == (0, 4)

    def test_half_video(self):
        assert X.segments_in_interval((0.5, 1.0), 4) == (2, 4)

    def test_touching_boundary_has_no_overlap(self):
        # [0.25, 0.5] touches segment 3 of 4 at a point only
        assert X.segments_in_interval((0.25, 0.5), 4) == (1, 2)

    def test_degenerate_interval_maps_to_containing_segment(self):
        assert X.segments_in_interval((0.6, 0.6), 4) == (2, 3)
        assert X.segments_in_interval((1.0, 1.0), 4) == (3, 4)

    def test_out_of_range_rejected(self):
        with pytest.raises(T.EngineError, match="outside"):
            X.segments_in_interval((-0.1, 0.5), 4)


class TestPosterior:
    def rows_for(self, per_segment):
        def node_range(lo, hi):
            return lo * per_segment, hi * per_segment
        return node_range

    def test_whole_interval_pools_all_rows(self):
        rng = np.random.default_rng(8)
        d, per_seg, n_seg = 3, 2, 4
        mt_vals = rng.standard_normal((per_seg * n_seg, d))
        mt = t(mt_vals, dtype=np.float64)
        ht_vals = rng.standard_normal((3, d))
        q_vals = rng.standard_normal((1, d))
        params = {"posterior.guide_video": t(np.eye(d), dtype=np.float64),
                  "posterior.guide_query": t(np.eye(d), dtype=np.float64)}
        z = X.infer_posterior(mt, t(ht_vals, dtype=np.float64),
                              t(q_vals, dtype=np.float64), (0.0, 1.0),
                              self.rows_for(per_seg), n_seg, params, None)
        assert z.shape == (8, 3)
        assert np.all(np.abs(z.values.sum(axis=1) - 1.0) <= 1e-6)
        # reference: m* is the mean over every row of the video graph
        mstar = mt_vals.mean(axis=0, keepdims=True)
        scores = (mstar * mt_vals) @ (q_vals * ht_vals).T
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        assert np.allclose(z.values, e / e.sum(axis=1, keepdims=True), atol=1e-9)

    def test_half_interval_pools_last_segments(self):
        d, per_seg, n_seg = 2, 2, 4
        vals = np.zeros((8, d), dtype=np.float32)
        vals[4:] = 1.0  # segments 3-4 marked
        mt = t(vals)
        captured = {}

        def node_range(lo, hi):
            captured["range"] = (lo, hi)
            return lo * per_seg, hi * per_seg

        params = {"posterior.guide_video": t(np.eye(d)),
                  "posterior.guide_query": t(np.eye(d))}
        X.infer_posterior(mt, t(np.ones((2, d))), t(np.ones((1, d))),
                          (0.5, 1.0), node_range, n_seg, params, None)
        assert captured["range"] == (2, 4)

    def test_differentiable(self):
        rng = np.random.default_rng(9)
        d, per_seg, n_seg = 3, 1, 2

        def fn(mt, ht, q, w3, w4, tape):
            return X.infer_posterior(
                mt, ht, q, (0.0, 1.0), self.rows_for(per_seg), n_seg,
                {"posterior.guide_video": w3, "posterior.guide_query": w4}, tape)

        r = finite_difference_check(
            fn, [rng.standard_normal((2, d)), rng.standard_normal((2, d)),
                 rng.standard_normal((1, d)),
                 rng.standard_normal((d, d)) * 0.5, rng.standard_normal((d, d)) * 0.5],
            name="infer_posterior")
        assert r.passed, r


def like_params(d, heads, df, rng):
    p = {"like.joint.W": t(rng.standard_normal((2 * d, d)) * 0.3),
         "like.seg.W": t(rng.standard_normal((df, d)) * 0.3),
         "like.attn.Wo": t(rng.standard_normal((d, d)) * 0.3),
         "like.pool.Wq": t(rng.standard_normal((d, d)) * 0.3),
         "like.pool.Wk": t(rng.standard_normal((d, d)) * 0.3),
         "like.head.W1": t(rng.standard_normal((d, d)) * 0.3),
         "like.head.b1": t(np.zeros((1, d))),
         "like.head.W2": t(rng.standard_normal((d, 2)) * 0.3),
         "like.head.b2": t(np.zeros((1, 2)))}
    dh = d // heads
    for hd in range(heads):
        p[f"like.attn.{hd}.Wq"] = t(rng.standard_normal((d, dh)) * 0.3)
        p[f"like.attn.{hd}.Wk"] = t(rng.standard_normal((d, dh)) * 0.3)
        p[f"like.attn.{hd}.Wv"] = t(rng.standard_normal((d, dh)) * 0.3)
    return p


class TestPredictInterval:
    def test_uniform_correspondence_blends_language_mean(self):
        rng = np.random.default_rng(10)
        d, nm, nh = 4, 5, 3
        ht = t(rng.standard_normal((nh, d)))
        z = X.uniform_correspondence(nm, nh)
        fused = T.matmul(z, ht)
        assert np.allclose(fused.values,
                           np.repeat(ht.values.mean(axis=0, keepdims=True), nm, axis=0),
                           atol=1e-6)

    def test_interval_always_ordered_in_unit_range(self):
        rng = np.random.default_rng(11)
        d, heads, df, n_seg = 4, 2, 3, 4
        params = like_params(d, heads, df, rng)
        for trial in range(50):
            mt = t(rng.standard_normal((6, d)) * 2.0)
            ht = t(rng.standard_normal((3, d)) * 2.0)
            z = X.uniform_correspondence(6, 3)
            q = t(rng.standard_normal((1, d)))
            seg = rng.standard_normal((n_seg, df)).astype(np.float32)
            pred = X.predict_interval(mt, ht, z, seg,
                                      X.positional_encoding(n_seg, d), q,
                                      params, heads, None)
            s, e = pred.values[0]
            assert 0.0 <= s <= e <= 1.0

    def test_pool_weights_stochastic(self):
        rng = np.random.default_rng(12)
        d, heads, df, n_seg = 4, 2, 3, 5
        params = like_params(d, heads, df, rng)
        trace = {}
        X.predict_interval(
            t(rng.standard_normal((4, d))), t(rng.standard_normal((2, d))),
            X.uniform_correspondence(4, 2),
            rng.standard_normal((n_seg, df)).astype(np.float32),
            X.positional_encoding(n_seg, d), t(rng.standard_normal((1, d))),
            params, heads, None, trace)
        for key in ("attn.pool", "attn.head"):
            for rows in trace[key]:
                assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        d, heads, df, n_seg = 4, 2, 3, 4
        params = like_params(d, heads, df, rng)
        args = (t(rng.standard_normal((4, d))), t(rng.standard_normal((2, d))),
                X.uniform_correspondence(4, 2),
                rng.standard_normal((n_seg, df)).astype(np.float32),
                X.positional_encoding(n_seg, d), t(rng.standard_normal((1, d))))
        p1 = X.predict_interval(*args, params, heads, None)
        p2 = X.predict_interval(*args, params, heads, None)
        assert np.array_equal(p1.values, p2.values)

    def test_prior_posterior_same_shape(self):
        rng = np.random.default_rng(14)
        d = 3
        mt = t(rng.standard_normal((4, d)))
        ht = t(rng.standard_normal((3, d)))
        q = t(rng.standard_normal((1, d)))
        pp = {"prior.node_proj": t(rng.standard_normal((d, d))),
              "prior.guide_proj": t(rng.standard_normal((d, d))),
              "posterior.guide_video": t(rng.standard_normal((d, d))),
              "posterior.guide_query": t(rng.standard_normal((d, d)))}
        zp = X.infer_prior(mt, ht, q, pp, None)
        zq = X.infer_posterior(mt, ht, q, (0.0, 1.0), lambda lo, hi: (lo, hi * 2),
                               2, pp, None)
        assert zp.shape == zq.shape
