import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from extre.coefficients import (
    SEPARABLE,
    TAILSUM,
    assemble_blocks,
    default_presets,
    delta_weight,
    extract_one_hop,
    extract_two_hop,
    load_block,
    load_block_matrix,
    make_spec,
    oracle_pair,
    save_block,
    save_block_matrix,
)
from extre.graph import GraphError, Stage, StageError, total_degrees

from _helpers import G, I, U, graph_from_pairs, random_graph, t1


def block(graph, head, middle, tail, stage=Stage.PRETRAIN):
    return extract_two_hop(make_spec(head, middle, tail), graph, total_degrees(graph, stage))


def assert_matches_oracle(graph, blk, tol=1e-12):
    spec = blk.spec
    beta = blk.beta_dense()
    alpha = blk.alpha.toarray()
    for v1 in range(blk.shape[0]):
        for v2 in range(blk.shape[1]):
            a, b = oracle_pair(graph, spec, v1, v2)
            assert abs(alpha[v1, v2] - a) <= tol, (spec.label, v1, v2)
            assert abs(beta[v1, v2] - b) <= tol, (spec.label, v1, v2)


class TestDeltaWeight:
    def test_examples(self):
        assert delta_weight(1, 1) == 1.0
        assert delta_weight(3, 8) == pytest.approx(2 / 9, abs=1e-15)
        assert delta_weight(0, 5) == 0.0

    def test_vectorized(self):
        out = delta_weight(np.array([0, 1, 3]), np.array([4, 1, 8]))
        np.testing.assert_allclose(out, [0.0, 1.0, 2 / 9], rtol=0, atol=1e-15)


class TestTwoHopT1:
    def test_gui_alpha(self):
        blk = block(t1(), G, U, I)
        want = 0.5 * math.sqrt(3 / 4) + 0.25 * math.sqrt(5 / 4)
        assert blk.alpha_at(0, 0) == pytest.approx(want, abs=1e-12)
        assert blk.alpha_at(0, 0) == pytest.approx(0.71251, abs=5e-5)

    def test_iug_alpha_is_asymmetric(self):
        blk = block(t1(), I, U, G)
        want = 0.5 + 0.25 * math.sqrt(5 / 3)
        assert blk.alpha_at(0, 0) == pytest.approx(want, abs=1e-12)
        assert blk.alpha_at(0, 0) != pytest.approx(block(t1(), G, U, I).alpha_at(0, 0))

    def test_gui_beta_and_tail_sum(self):
        blk = block(t1(), G, U, I)
        assert blk.beta_at(0, 0) == pytest.approx(1 / 3, abs=1e-12)
        assert blk.alpha_at(0, 0) + blk.beta_at(0, 0) == pytest.approx(blk.tail_sum[0], abs=1e-12)

    def test_gug_oracle_value(self):
        a, _ = oracle_pair(t1(), make_spec(G, U, G), 0, 1)
        assert a == pytest.approx(0.25 * math.sqrt(5 / 3), abs=1e-12)
        assert block(t1(), G, U, G).alpha_at(0, 1) == pytest.approx(a, abs=1e-12)

    @pytest.mark.parametrize("kinds", [(G, U, G), (G, U, I), (I, U, G), (I, U, I)])
    def test_every_entry_matches_oracle(self, kinds):
        g = t1()
        assert_matches_oracle(g, block(g, *kinds))

    def test_isolated_head_gets_whole_tail_sum(self):
        g = graph_from_pairs([("g1", "u1"), ("g2", "u9")], [("u1", "i1"), ("u1", "i2")])
        blk = block(g, G, U, I)
        spec = blk.spec
        # g2's only user has no items, so it shares no middle node with any item
        for i in range(2):
            a, b = oracle_pair(g, spec, 1, i)
            assert a == 0.0
            assert b == pytest.approx(blk.tail_sum[i], abs=1e-15)

    def test_kind_mismatch(self):
        with pytest.raises(GraphError):
            make_spec(G, G, I)
        with pytest.raises(GraphError):
            make_spec(G, U, U)

    def test_stage_mismatch(self):
        g = t1(with_y=True)
        with pytest.raises(GraphError):
            extract_two_hop(make_spec(G, U, I), g, total_degrees(g, Stage.FINETUNE))


class TestOneHop:
    def test_single_edge(self):
        g = graph_from_pairs(y=[("g", "i")])
        gi, ig = extract_one_hop(g, total_degrees(g, Stage.FINETUNE))
        assert gi.form == SEPARABLE
        assert gi.alpha_at(0, 0) == pytest.approx(1.0, abs=1e-15)
        assert gi.beta_at(0, 0) == pytest.approx(1.0, abs=1e-15)
        assert ig.alpha_at(0, 0) == pytest.approx(1.0, abs=1e-15)

    def test_non_edge_has_beta_only(self):
        g = graph_from_pairs(y=[("g1", "i1"), ("g2", "i2")])
        gi, _ = extract_one_hop(g, total_degrees(g, Stage.FINETUNE))
        assert gi.alpha_at(0, 1) == 0.0
        assert gi.beta_at(0, 1) > 0.0

    def test_degree_3_8(self):
        y = [("g0", "i0"), ("g0", "i1"), ("g0", "i2")] + [(f"h{k}", "i0") for k in range(7)]
        g = graph_from_pairs(y=y)
        d = total_degrees(g, Stage.FINETUNE)
        assert (d.group[0], d.item[0]) == (3, 8)
        gi, _ = extract_one_hop(g, d)
        assert gi.alpha_at(0, 0) == pytest.approx(2 / 9, abs=1e-15)

    def test_isolated_nodes_contribute_nothing(self):
        # g2 and i2 exist through z and x but have no group-item edge;
        # i2 is seen first, so it is item 0
        g = graph_from_pairs(z=[("g1", "u1"), ("g2", "u1")], x=[("u1", "i2")], y=[("g1", "i1")])
        gi, ig = extract_one_hop(g, total_degrees(g, Stage.FINETUNE))
        beta = gi.beta_dense()
        assert beta[0, 1] > 0
        assert not beta[1].any() and not beta[:, 0].any()
        assert not ig.beta_dense()[0].any()

    def test_matches_oracle(self):
        g = t1(with_y=True)
        gi, ig = extract_one_hop(g, total_degrees(g, Stage.FINETUNE))
        assert_matches_oracle(g, gi)
        assert_matches_oracle(g, ig)


class TestAssemble:
    def test_pretrain_t1_shapes(self):
        bm = assemble_blocks(Stage.PRETRAIN, t1())
        assert bm.labels == ["GUG", "GUI", "IUG", "IUI"]
        assert all(b.shape == (2, 2) for b in bm.blocks.values())
        assert bm.alpha().shape == (4, 4)

    def test_finetune_labels_and_forms(self):
        bm = assemble_blocks(Stage.FINETUNE, t1(with_y=True))
        assert bm.labels == ["GIG", "GI", "IG", "IGI"]
        assert bm.blocks[(G, G)].form == TAILSUM
        assert bm.blocks[(G, I)].form == SEPARABLE

    def test_finetune_without_y(self):
        with pytest.raises(StageError, match="stage requires group-item relation"):
            assemble_blocks(Stage.FINETUNE, t1())

    def test_bundle_labels(self):
        assert [s.label for s in default_presets(Stage.PRETRAIN, "bundle")] == ["UIU", "UIB", "BIU", "BIB"]
        assert [s.label for s in default_presets(Stage.FINETUNE, "bundle")] == ["UBU", "UB", "BU", "BUB"]

    def test_duplicate_pair(self):
        presets = default_presets(Stage.PRETRAIN)
        presets[0] = make_spec(G, U, I)
        with pytest.raises(GraphError, match="duplicate"):
            assemble_blocks(Stage.PRETRAIN, t1(), presets)

    def test_missing_pair(self):
        with pytest.raises(GraphError):
            assemble_blocks(Stage.PRETRAIN, t1(), default_presets(Stage.PRETRAIN)[:3])

    def test_beta_rows_match_blocks(self):
        g = t1(with_y=True)
        bm = assemble_blocks(Stage.FINETUNE, g)
        rows = bm.beta_rows(np.arange(bm.n_nodes))
        np.testing.assert_allclose(rows[:2, :2], bm.blocks[(G, G)].beta_dense())
        np.testing.assert_allclose(rows[2:, :2], bm.blocks[(I, G)].beta_dense())

    def test_positive_pairs_skip_self(self):
        pairs = assemble_blocks(Stage.PRETRAIN, t1()).positive_pairs()
        assert len(pairs) == 12  # every off-diagonal pair on T1
        assert not np.any(pairs[:, 0] == pairs[:, 1])


class TestPersistence:
    def test_block_round_trip(self, tmp_path):
        bm = assemble_blocks(Stage.FINETUNE, t1(with_y=True))
        for blk in bm.blocks.values():
            path = tmp_path / f"{blk.spec.label}.blk"
            save_block(blk, path, Stage.FINETUNE)
            stage, again = load_block(path)
            assert stage is Stage.FINETUNE
            assert again.spec == blk.spec
            assert (again.alpha != blk.alpha).nnz == 0
            np.testing.assert_array_equal(again.beta_dense(), blk.beta_dense())

    def test_matrix_round_trip(self, tmp_path):
        bm = assemble_blocks(Stage.PRETRAIN, random_graph(np.random.default_rng(4), max_nodes=20))
        paths = save_block_matrix(bm, tmp_path)
        assert len(paths) == 4
        again = load_block_matrix(tmp_path)
        assert again.labels == bm.labels
        assert (again.alpha() != bm.alpha()).nnz == 0

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.blk"
        p.write_text("hello\n")
        with pytest.raises(GraphError):
            load_block(p)


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([Stage.PRETRAIN, Stage.FINETUNE]))
    def test_oracle_equivalence(self, seed, stage):
        g = random_graph(np.random.default_rng(seed), max_nodes=10)
        assume(stage is Stage.PRETRAIN or g.y.nnz > 0)
        bm = assemble_blocks(stage, g)
        for blk in bm.blocks.values():
            assert_matches_oracle(g, blk)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_tail_sum_and_nonnegativity(self, seed):
        g = random_graph(np.random.default_rng(seed), max_nodes=30)
        assume(g.y.nnz > 0)
        for stage in Stage:
            for blk in assemble_blocks(stage, g).blocks.values():
                alpha = blk.alpha.toarray()
                beta = blk.beta_dense()
                assert alpha.min() >= 0 and beta.min() >= 0
                if blk.form == TAILSUM:
                    assert blk.tail_sum.min() >= 0
                    np.testing.assert_allclose(alpha + beta, np.broadcast_to(blk.tail_sum, alpha.shape), rtol=0, atol=1e-12)
                    assert np.all(alpha <= blk.tail_sum + 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_sparsity_bound(self, seed):
        g = random_graph(np.random.default_rng(seed), max_nodes=30)
        blk = block(g, G, U, I)
        reach = (g.z.csr @ g.x.csr).nnz
        assert blk.alpha.nnz <= reach

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_asymmetry_witness(self, seed):
        g = random_graph(np.random.default_rng(seed), max_nodes=15, density=0.4, min_nodes=4)
        d = total_degrees(g, Stage.PRETRAIN)
        gui = block(g, G, U, I).alpha.toarray()
        iug = block(g, I, U, G).alpha.toarray()
        shared = (gui > 0) & (iug.T > 0)
        unequal = d.group[:, None] != d.item[None, :]
        if not np.any(shared & unequal):
            return
        assert np.any(np.abs(gui - iug.T)[shared & unequal] > 1e-12)
