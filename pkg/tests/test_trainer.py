import numpy as np
import pytest

from extre.coefficients import assemble_blocks
from extre.graph import Stage
from extre.trainer import (
    EarlyStopper,
    EmbeddingTable,
    Role,
    TrainConfig,
    TrainError,
    concat,
    cosine_scores,
    init_embeddings,
    load_embeddings,
    save_embeddings,
    score,
    train_stage,
)

from _helpers import graph_from_pairs, t1, two_communities


def cosines(rows):
    n = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return n @ n.T


class TestInit:
    def test_deterministic(self):
        np.testing.assert_array_equal(init_embeddings(5, 4, 3).rows, init_embeddings(5, 4, 3).rows)
        assert not np.array_equal(init_embeddings(5, 4, 3).rows, init_embeddings(5, 4, 4).rows)

    def test_shape(self):
        assert init_embeddings(3, 64, 0).rows.shape == (3, 64)

    def test_statistics(self):
        rows = init_embeddings(1000, 100, seed=0).rows
        assert abs(rows.mean()) < 0.01
        assert abs(rows.std() - 0.1) < 0.01

    def test_rejects_empty(self):
        with pytest.raises(TrainError):
            init_embeddings(0, 4, 0)


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path):
        table = concat(np.full((3, 2), 0.5), np.arange(6.0).reshape(3, 2))
        save_embeddings(table, tmp_path / "e.emb")
        again = load_embeddings(tmp_path / "e.emb")
        assert again.role is Role.CONCAT
        np.testing.assert_array_equal(again.rows, table.rows)

    def test_layout(self, tmp_path):
        save_embeddings(EmbeddingTable(np.array([[1.0, 2.0]]), Role.PRETRAIN), tmp_path / "p.emb")
        raw = (tmp_path / "p.emb").read_bytes()
        assert raw[:8] == b"EXTREEMB"
        assert raw[8:21] == bytes([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0])
        np.testing.assert_array_equal(np.frombuffer(raw[21:], "<f4"), [1.0, 2.0])

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.emb").write_bytes(b"not an embedding file")
        with pytest.raises(TrainError):
            load_embeddings(tmp_path / "x.emb")


class TestEarlyStopper:
    def test_stops_after_patience(self):
        s = EarlyStopper(3)
        assert s.update(1, 0.5)
        for e in range(2, 5):
            assert not s.update(e, 0.4)
        assert s.should_stop
        assert s.best_epoch == 1

    def test_ties_do_not_count_as_improvement(self):
        s = EarlyStopper(2)
        s.update(1, 0.5)
        assert not s.update(2, 0.5)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"dim": 0}, {"lr": 0.0}, {"tau": -1.0}, {"negative_pool": 0}, {"loss_variant": "hinge"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainStage:
    def test_pretrain_needs_no_group_item_edges(self):
        g = t1()
        assert g.y is None
        table, report = train_stage("pretrain", assemble_blocks(Stage.PRETRAIN, g), TrainConfig(dim=4, max_epochs=3))
        assert table.rows.shape == (4, 4)
        assert report.stop_epoch == 3

    def test_empty_q(self):
        g = graph_from_pairs([("g1", "u1")], [("u2", "i1")])
        with pytest.raises(TrainError, match="no positive-consistency pairs"):
            train_stage("pretrain", assemble_blocks(Stage.PRETRAIN, g), TrainConfig(dim=2))

    def test_finetune_stops_at_epoch_11_on_degrading_validation(self):
        g = t1(with_y=True)
        bm = assemble_blocks(Stage.FINETUNE, g)
        init = init_embeddings(bm.n_nodes, 4, 0)
        calls = []

        def degrading(table):
            calls.append(1)
            return -len(calls)

        table, report = train_stage("finetune", bm, TrainConfig(dim=4, patience=10, max_epochs=100), init, degrading)
        assert report.stop_epoch == 11
        assert report.best_epoch == 1
        assert len(report.losses) == 11

    def test_best_rows_restored(self):
        g = t1(with_y=True)
        bm = assemble_blocks(Stage.FINETUNE, g)
        init = init_embeddings(bm.n_nodes, 4, 0)
        snapshots = []

        def record(table):
            snapshots.append(table.rows.copy())
            return [0.1, 0.9, 0.2, 0.3][len(snapshots) - 1]

        table, report = train_stage("finetune", bm, TrainConfig(dim=4, patience=2, max_epochs=10, lr=0.05), init, record)
        assert report.best_epoch == 2
        np.testing.assert_array_equal(table.rows, snapshots[1])

    def test_stop_gradient(self):
        g = t1(with_y=True)
        bm = assemble_blocks(Stage.FINETUNE, g)
        ep = init_embeddings(bm.n_nodes, 8, 1)
        table, _ = train_stage("finetune", bm, TrainConfig(dim=8, lr=0.01, max_epochs=100), ep)
        assert table.role is Role.CONCAT
        assert table.dim == 16
        assert np.array_equal(table.pretrain_part(), ep.rows)
        assert not np.array_equal(table.finetune_part(), ep.rows)

    def test_finetune_init_mismatch(self):
        bm = assemble_blocks(Stage.FINETUNE, t1(with_y=True))
        with pytest.raises(TrainError, match="dim"):
            train_stage("finetune", bm, TrainConfig(dim=8), init_embeddings(bm.n_nodes, 4, 0))
        with pytest.raises(TrainError, match="rows"):
            train_stage("finetune", bm, TrainConfig(dim=4), init_embeddings(bm.n_nodes + 1, 4, 0))

    def test_finetune_without_init_is_random_table(self):
        bm = assemble_blocks(Stage.FINETUNE, t1(with_y=True))
        table, _ = train_stage("finetune", bm, TrainConfig(dim=4, max_epochs=2))
        assert table.role is Role.FINETUNE
        assert table.dim == 4

    def test_full_batch_loss_is_nearly_monotone(self):
        bm = assemble_blocks(Stage.PRETRAIN, t1())
        _, report = train_stage("pretrain", bm, TrainConfig(dim=8, lr=0.01, max_epochs=50), full_batch=True)
        assert int(np.sum(np.diff(report.losses) > 0)) <= 5

    def test_deterministic(self):
        bm = assemble_blocks(Stage.PRETRAIN, t1())
        cfg = TrainConfig(dim=4, max_epochs=10, batch_size=5, negative_pool=3, seed=9)
        a, ra = train_stage("pretrain", bm, cfg)
        b, rb = train_stage("pretrain", bm, cfg)
        assert ra.losses == rb.losses
        np.testing.assert_array_equal(a.rows, b.rows)
        assert ra.to_text() == rb.to_text()

    @pytest.mark.parametrize("variant", ["origin", "mse", "ce"])
    def test_ablation_variants_train(self, variant):
        bm = assemble_blocks(Stage.PRETRAIN, t1())
        table, report = train_stage("pretrain", bm, TrainConfig(dim=4, lr=0.01, max_epochs=20, loss_variant=variant))
        assert np.all(np.isfinite(table.rows))
        assert report.losses[-1] < report.losses[0]

    def test_t1_toy_comparison_is_vacuous(self):
        g = t1()
        bm = assemble_blocks(Stage.PRETRAIN, g)
        table, _ = train_stage("pretrain", bm, TrainConfig(dim=8, lr=0.01, max_epochs=200), full_batch=True)
        alpha = bm.alpha().toarray()
        sims = cosines(table.rows)
        # on T1 every group-item pair has alpha > 0, so there is no alpha-zero rival
        assert np.all(alpha[:2, 2:] > 0)
        assert np.all(np.isfinite(sims))

    def test_alpha_positive_partners_rank_first(self):
        bm = assemble_blocks(Stage.PRETRAIN, two_communities())
        table, _ = train_stage("pretrain", bm, TrainConfig(dim=8, lr=0.01, max_epochs=300), full_batch=True)
        alpha = bm.alpha().toarray()
        sims = cosines(table.rows)
        for v in range(bm.n_nodes):
            others = np.arange(bm.n_nodes) != v
            pos = others & (alpha[v] > 0)
            zero = others & (alpha[v] == 0)
            assert pos.any() and zero.any()
            assert sims[v, pos].min() > sims[v, zero].max()


class TestScore:
    def test_identical_rows(self):
        rows = np.array([[1.0, 2.0], [1.0, 2.0]])
        assert score(rows, 0, 0, 1) == pytest.approx(1.0)

    def test_orthogonal_rows(self):
        assert score(np.array([[1.0, 0.0], [0.0, 3.0]]), 0, 0, 1) == 0.0

    def test_scale_invariant(self):
        rows = np.random.default_rng(0).normal(size=(2, 5))
        s = score(rows, 0, 0, 1)
        scaled = rows * np.array([[3.0], [0.25]])
        assert score(scaled, 0, 0, 1) == pytest.approx(s, abs=1e-14)

    def test_zero_row(self):
        rows = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert score(rows, 0, 0, 1) == 0.0
        assert cosine_scores(rows, 1)[0, 0] == 0.0

    def test_matrix_agrees_with_scalar(self):
        rows = np.random.default_rng(1).normal(size=(5, 3))
        m = cosine_scores(rows, 2)
        for g in range(2):
            for i in range(3):
                assert m[g, i] == pytest.approx(score(EmbeddingTable(rows, Role.CONCAT), g, i, 2), abs=1e-14)
