"""Graph construction, wiring, masking, and annotation IO."""

import numpy as np
import pytest

from crossground import graphs as G


@pytest.fixture
def table():
    return G.EmbeddingTable(dim=8)


def make_video(n_segments=1, n_actions=3, n_objects=5, k=2, dim=4):
    rng = np.random.default_rng(0)
    segs = []
    for t in range(n_segments):
        segs.append(G.Segment(
            frames=rng.standard_normal((k, dim)).astype(np.float32),
            actions=[(f"act{i}", 0.9 - 0.1 * i) for i in range(n_actions)],
            objects=[(f"obj{i}", 0.8 - 0.1 * i) for i in range(n_objects)],
        ))
    return G.VideoAnnotation("v0", 10.0 * n_segments, segs)


class TestEmbeddings:
    def test_single_word(self, table):
        v = table.vector("ball")
        assert np.array_equal(table.embed_label("ball"), v)

    def test_multi_word_is_sum(self, table):
        u, v = table.vector("exercise"), table.vector("ball")
        assert np.allclose(table.embed_label("exercise ball"), u + v, atol=1e-6)

    def test_unknown_word_deterministic(self):
        a = G.EmbeddingTable(dim=8).vector("zzyzx")
        b = G.EmbeddingTable(dim=8).vector("zzyzx")
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-5)

    def test_empty_label_rejected(self, table):
        with pytest.raises(G.GraphError, match="empty label"):
            table.embed_label("   ")

    def test_file_vectors_override_hash(self, tmp_path):
        f = tmp_path / "vecs.txt"
        f.write_text("ball 1.0 0.0 0.0\nexercise 0.0 2.0 0.0\n")
        t = G.EmbeddingTable.from_text_file(f)
        assert t.dim == 3
        assert np.allclose(t.embed_label("exercise ball"), [1.0, 2.0, 0.0])


class TestVideoGraph:
    def test_node_counts_with_quotas(self, table):
        ann = make_video(n_segments=4)
        g = G.build_video_graph(ann, table, actions_per_segment=3, objects_per_segment=5)
        kinds = g.kinds
        assert kinds.count(G.KIND_ACTION) == 12
        assert kinds.count(G.KIND_OBJECT) == 20

    def test_padding_with_unk(self, table):
        ann = make_video(n_objects=1)
        g = G.build_video_graph(ann, table, 3, 5)
        objs = [n for n in g.nodes if n.kind == G.KIND_OBJECT]
        assert [n.label for n in objs] == ["obj0"] + [G.UNK_LABEL] * 4

    def test_score_ties_break_by_label_then_order(self, table):
        seg = G.Segment(
            frames=np.zeros((1, 2), np.float32),
            actions=[("zebra", 0.5), ("apple", 0.5), ("mango", 0.5)],
            objects=[("x", 1.0)])
        ann = G.VideoAnnotation("v", 5.0, [seg])
        g = G.build_video_graph(ann, table, 2, 1)
        acts = [n.label for n in g.nodes if n.kind == G.KIND_ACTION]
        assert acts == ["apple", "mango"]

    def test_segment_major_actions_first_order(self, table):
        ann = make_video(n_segments=2)
        g = G.build_video_graph(ann, table, 2, 3)
        kinds = g.kinds
        assert kinds[:5] == ["action", "action", "object", "object", "object"]
        owners = [n.owner for n in g.nodes]
        assert owners == [0] * 5 + [1] * 5

    def test_zero_segments_rejected(self, table):
        with pytest.raises(G.GraphError, match="zero segments"):
            G.build_video_graph(G.VideoAnnotation("v", 1.0, []), table, 3, 5)

    def test_deterministic_construction(self, table):
        ann = make_video(n_segments=2)
        g1 = G.build_video_graph(ann, table, 3, 5)
        g2 = G.build_video_graph(ann, table, 3, 5)
        assert [n.label for n in g1.nodes] == [n.label for n in g2.nodes]
        assert np.array_equal(g1.feature_matrix(), g2.feature_matrix())


class TestLanguageGraph:
    def test_counts(self, table):
        q = G.QueryAnnotation("q", "v", [
            G.QueryStructure("throw", ["ball", "park", "dog"]),
            G.QueryStructure("run", ["track", "shoes", "fast"]),
        ], ["throw", "ball"], (0.0, 1.0))
        g = G.build_language_graph(q, table)
        assert g.kinds.count(G.KIND_ACTION) == 2
        assert g.kinds.count(G.KIND_OBJECT) == 6

    def test_shared_argument_duplicated(self, table):
        q = G.QueryAnnotation("q", "v", [
            G.QueryStructure("throw", ["ball"]),
            G.QueryStructure("catch", ["ball"]),
        ], [], (0.0, 1.0))
        g = G.build_language_graph(q, table)
        balls = [n for n in g.nodes if n.label == "ball"]
        assert len(balls) == 2
        assert {n.owner for n in balls} == {0, 1}

    def test_zero_argument_structure(self, table):
        q = G.QueryAnnotation("q", "v", [G.QueryStructure("sleep", [])], [], (0.0, 2.0))
        g = G.build_language_graph(q, table)
        assert g.kinds == [G.KIND_ACTION]

    def test_zero_structures_rejected(self, table):
        with pytest.raises(G.GraphError, match="zero structures"):
            G.build_language_graph(
                G.QueryAnnotation("q", "v", [], [], (0.0, 1.0)), table)


class TestWiring:
    def test_single_segment_edge_counts(self, table):
        g = G.build_video_graph(make_video(), table, 3, 5)
        G.wire_edges(g)
        by_rel = {r: 0 for r in G.RELATIONS}
        for _, _, rel in g.edges:
            by_rel[rel] += 1
        assert by_rel[G.REL_OBJECT_OBJECT] == 10   # C(5,2)
        assert by_rel[G.REL_ACTION_OBJECT] == 15   # 3*5
        assert by_rel[G.REL_ACTION_ACTION] == 3    # C(3,2)

    def test_single_action_node_no_edges(self, table):
        q = G.QueryAnnotation("q", "v", [G.QueryStructure("sit", [])], [], (0.0, 1.0))
        g = G.wire_edges(G.build_language_graph(q, table))
        assert g.edges == []

    def test_object_edges_do_not_cross_segments(self, table):
        g = G.wire_edges(G.build_video_graph(make_video(n_segments=2), table, 3, 5))
        owners = [n.owner for n in g.nodes]
        for i, j, rel in g.edges:
            if rel == G.REL_OBJECT_OBJECT:
                assert owners[i] == owners[j]

    def test_action_edges_cross_segments(self, table):
        g = G.wire_edges(G.build_video_graph(make_video(n_segments=2), table, 2, 1))
        owners = [n.owner for n in g.nodes]
        crossing = [(i, j) for i, j, rel in g.edges
                    if rel == G.REL_ACTION_ACTION and owners[i] != owners[j]]
        assert crossing

    def test_edges_stored_once_lower_index_first(self, table):
        g = G.wire_edges(G.build_video_graph(make_video(n_segments=2), table, 3, 5))
        seen = set()
        for i, j, rel in g.edges:
            assert i < j
            assert (i, j, rel) not in seen
            seen.add((i, j, rel))

    def test_rewire_rejected(self, table):
        g = G.wire_edges(G.build_video_graph(make_video(), table, 3, 5))
        with pytest.raises(G.GraphError, match="already has edges"):
            G.wire_edges(g)

    def test_every_edge_obeys_its_rule(self, table):
        g = G.wire_edges(G.build_video_graph(make_video(n_segments=3), table, 3, 5))
        kinds, owners = g.kinds, [n.owner for n in g.nodes]
        for i, j, rel in g.edges:
            pair = {kinds[i], kinds[j]}
            if rel == G.REL_OBJECT_OBJECT:
                assert pair == {"object"} and owners[i] == owners[j]
            elif rel == G.REL_ACTION_OBJECT:
                assert pair == {"action", "object"} and owners[i] == owners[j]
            else:
                assert pair == {"action"}


class TestMasking:
    def test_p_zero_masks_nothing(self, table):
        g = G.build_video_graph(make_video(), table, 3, 5)
        masked, rec = G.mask_nodes(g, 0.0, seed=1, table=table)
        assert rec.indices == []
        assert np.array_equal(masked.feature_matrix(), g.feature_matrix())

    def test_p_one_masks_everything(self, table):
        g = G.build_video_graph(make_video(), table, 3, 5)
        masked, rec = G.mask_nodes(g, 1.0, seed=1, table=table)
        assert len(rec.indices) == len(g.nodes)
        assert all(n.label == G.MASK_LABEL for n in masked.nodes)

    def test_language_graph_rejected(self, table):
        q = G.QueryAnnotation("q", "v", [G.QueryStructure("sit", ["chair"])], [], (0.0, 1.0))
        g = G.build_language_graph(q, table)
        with pytest.raises(G.GraphError, match="video-side"):
            G.mask_nodes(g, 0.1, seed=0, table=table)

    def test_record_keeps_originals(self, table):
        g = G.build_video_graph(make_video(), table, 3, 5)
        masked, rec = G.mask_nodes(g, 1.0, seed=3, table=table)
        assert rec.original_labels == [n.label for n in g.nodes]

    def test_monte_carlo_mean_matches_binomial(self, table):
        # 32 nodes at p=0.1 -> expected masked count 3.2
        g = G.build_video_graph(make_video(n_segments=4), table, 3, 5)
        counts = [len(G.mask_nodes(g, 0.1, seed=s, table=table)[1].indices)
                  for s in range(10000)]
        assert np.mean(counts) == pytest.approx(3.2, abs=0.2)


class TestAnnotationIO:
    def test_roundtrip(self, tmp_path, table):
        ann = make_video(n_segments=2)
        q = G.QueryAnnotation("q0", "v0", [G.QueryStructure("a", ["b"])],
                              ["a", "b"], (1.0, 5.0))
        vp, qp = tmp_path / "videos.ndjson", tmp_path / "queries.ndjson"
        G.save_ndjson(vp, [G.video_to_dict(ann)])
        G.save_ndjson(qp, [G.query_to_dict(q)])
        videos = G.load_video_annotations(vp)
        queries = G.load_query_annotations(qp)
        assert videos["v0"].duration == ann.duration
        assert np.allclose(videos["v0"].segments[1].frames, ann.segments[1].frames)
        assert queries[0].structures[0].predicate == "a"

    def test_json_array_also_accepted(self, tmp_path):
        qp = tmp_path / "queries.json"
        qp.write_text('[{"query_id": "q", "video_id": "v", "tokens": [], '
                      '"structures": [{"predicate": "p", "arguments": []}], '
                      '"gt_interval": [0.0, 1.0]}]')
        assert len(G.load_query_annotations(qp)) == 1

    def test_interval_validation(self):
        with pytest.raises(G.GraphError, match="bad interval"):
            G.QueryAnnotation("q", "v", [G.QueryStructure("p", [])], [],
                              (2.0, 1.0)).validate()
