import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from naive_metrics import naive_metrics
from occreid import diffcore as dc
from occreid.data import SyntheticSpec, generate_synthetic, normalize
from occreid.errors import ContractError, MetricsError
from occreid.evaluation import (attention_mask_mass, compute_cmc, compute_map, distance_matrix,
                                downsample_mask, embed, evaluate, evaluate_ranking, rank, rank_list)
from occreid.model import ModelConfig, build_model


def random_problem(rng, n_q=None, n_g=None, ties=False):
    n_q = n_q or int(rng.integers(1, 12))
    n_g = n_g or int(rng.integers(2, 30))
    n_ids = int(rng.integers(1, 6))
    dist = rng.integers(0, 4, (n_q, n_g)).astype(float) if ties else rng.random((n_q, n_g))
    labels = [rng.integers(0, n_ids, n) for n in (n_q, n_g)]
    cams = [rng.integers(0, 3, n) for n in (n_q, n_g)]
    return dist, labels[0], cams[0], labels[1], cams[1]


class TestAgainstNaiveOracle:
    @pytest.mark.parametrize("seed", range(40))
    @pytest.mark.parametrize("ties", [False, True])
    def test_random_matrices(self, seed, ties):
        rng = np.random.default_rng(seed)
        dist, qp, qc, gp, gc = random_problem(rng, ties=ties)
        try:
            cmc_ref, map_ref, excl_ref = naive_metrics(dist.tolist(), qp, qc, gp, gc)
        except ZeroDivisionError:
            with pytest.raises(MetricsError):
                evaluate_ranking(rank(dist, qp, qc, gp, gc))
            return
        rep = evaluate_ranking(rank(dist, qp, qc, gp, gc))
        for r in (1, 5, 10):
            assert abs(rep.cmc[r] - cmc_ref[r]) <= 1e-10
        assert abs(rep.mAP - map_ref) <= 1e-10
        assert rep.excluded == excl_ref


class TestExamples:
    def test_ap_two_of_three(self):
        # matches at ranks 1 and 3 -> AP = (1 + 2/3) / 2
        r = rank(np.array([[0.1, 0.2, 0.3]]), [0], [0], [0, 1, 0], [1, 1, 1])
        assert compute_map(r) == pytest.approx(5 / 6, abs=1e-12)
        assert compute_cmc(r) == {1: 1.0, 5: 1.0, 10: 1.0}

    def test_first_match_at_rank_two(self):
        r = rank(np.array([[0.1, 0.2, 0.3]]), [0], [0], [1, 0, 2], [1, 1, 1])
        assert compute_cmc(r, (1, 2)) == {1: 0.0, 2: 1.0}
        assert compute_map(r) == pytest.approx(0.5)

    def test_same_camera_same_id_excluded(self):
        # the nearest entry is the query's own id on its own camera; it must be skipped
        r = rank(np.array([[0.0, 0.5, 0.6]]), [3], [0], [3, 7, 3], [0, 1, 1])
        assert compute_cmc(r, (1, 2)) == {1: 0.0, 2: 1.0}

    def test_ties_break_by_gallery_index(self):
        r = rank(np.zeros((1, 3)), [0], [0], [1, 0, 0], [1, 1, 1])
        assert compute_cmc(r, (1,))[1] == 0.0
        assert compute_map(r) == pytest.approx((1 / 2 + 2 / 3) / 2)

    def test_query_without_relevant_is_counted(self):
        r = rank(np.array([[0.1, 0.5, 0.9], [0.2, 0.3, 0.4]]), [0, 9], [0, 0], [0, 1, 2], [1, 1, 1])
        rep = evaluate_ranking(r)
        assert rep.num_queries == 1 and rep.excluded == 1 and rep.cmc[1] == 1.0

    def test_all_excluded_raises(self):
        with pytest.raises(MetricsError):
            evaluate_ranking(rank(np.zeros((1, 2)), [5], [0], [0, 1], [0, 0]))

    def test_non_finite_distance(self):
        with pytest.raises(MetricsError):
            rank(np.array([[np.nan, 0.0]]), [0], [0], [0, 1], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            rank(np.zeros((2, 3)), [0], [0], [0, 1, 2], [1, 1, 1])

    def test_report_lines(self, tmp_path):
        rep = evaluate_ranking(rank(np.array([[0.1, 0.2]]), [0], [0], [0, 1], [1, 1]))
        rep.write(tmp_path / "m.txt")
        keys = [line.split(":")[0] for line in (tmp_path / "m.txt").read_text().splitlines()]
        assert keys == ["rank1", "rank5", "rank10", "mAP", "queries", "excluded_queries"]


class TestDistance:
    def test_identical_and_opposite(self):
        v = np.array([[0.6, 0.8]])
        np.testing.assert_allclose(distance_matrix(v, np.vstack([v, -v, [[0.8, -0.6]]])), [[0.0, 2.0, 1.0]],
                                   atol=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        q, g = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        d = distance_matrix(q, g)
        for i in range(3):
            for j in range(5):
                assert d[i, j] == pytest.approx(1 - sum(q[i, c] * g[j, c] for c in range(4)), abs=1e-12)


class TestRankList:
    @pytest.mark.parametrize("seed", range(5))
    def test_consistent_with_cmc10(self, seed):
        rng = np.random.default_rng(seed)
        dist, qp, qc, gp, gc = random_problem(rng, n_q=6, n_g=25)
        gp[:3], gc[:3] = qp[0], (qc[0] + 1) % 3  # query 0 surely has valid matches
        r = rank(dist, qp, qc, gp, gc)
        idx, flags = rank_list(0, r, 10)
        assert np.all(np.diff(dist[0, idx]) >= 0)
        assert not np.any((gp[idx] == qp[0]) & (gc[idx] == qc[0]))
        single = rank(dist[:1], qp[:1], qc[:1], gp, gc)
        assert compute_cmc(single, (10,))[10] == float(flags.any())

    def test_bounds(self):
        r = rank(np.zeros((1, 3)), [0], [0], [0, 1, 2], [1, 1, 1])
        with pytest.raises(ContractError):
            rank_list(1, r)
        with pytest.raises(ContractError):
            rank_list(0, r, 4)


class TestMasks:
    def test_downsample_exact(self):
        m = np.zeros((8, 4), bool)
        m[:4, :2] = True
        np.testing.assert_array_equal(downsample_mask(m, 2, 2), [[1, 0], [0, 0]])

    def test_mass(self):
        m = np.zeros((4, 4), bool)
        m[2:] = True
        a = np.array([[0.1, 0.2], [0.3, 0.4]])
        assert attention_mask_mass(a, m) == pytest.approx(0.7)


@pytest.fixture(scope="module")
def small_model_and_data():
    ds = generate_synthetic(SyntheticSpec(num_ids=6, images_per_id=4, height=32, width=16, num_test_ids=6,
                                          test_images_per_id=3, seed=3))
    cfg = ModelConfig(height=32, width=16, channels=(8, 12, 16, 24), dim=16, heads=2, enc_layers=1,
                      dec_layers=1, num_queries=3, num_classes=6)
    return build_model(cfg, 5), ds


class TestEmbed:
    def test_unit_norm_and_shape(self, small_model_and_data):
        model, ds = small_model_and_data
        f = embed(model, ds.query)
        assert f.shape == (len(ds.query), 2 * 16)
        np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-6)

    def test_matches_training_forward_direction(self, small_model_and_data):
        model, ds = small_model_and_data
        x = normalize(np.stack([r.pixels for r in ds.query[:3]]), model.config.pixel_mean, model.config.pixel_std)
        with dc.no_grad():
            raw = model(x.astype(np.float32)).f.data.astype(np.float64)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        np.testing.assert_allclose(embed(model, ds.query[:3]), raw, atol=1e-6)

    def test_batching_invariant(self, small_model_and_data):
        model, ds = small_model_and_data
        np.testing.assert_allclose(embed(model, ds.gallery, batch_size=3), embed(model, ds.gallery), atol=1e-6)

    def test_wrong_resolution(self, small_model_and_data):
        model, _ = small_model_and_data
        with pytest.raises(ContractError):
            embed(model, np.zeros((1, 3, 16, 16)))

    def test_untrained_near_chance(self, small_model_and_data):
        model, ds = small_model_and_data
        rep, _ = evaluate(model, ds.query, ds.gallery)
        assert 0.0 <= rep.cmc[1] <= rep.cmc[5] <= rep.cmc[10] <= 1.0
        assert rep.mAP <= 1.0
