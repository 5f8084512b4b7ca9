import numpy as np
import pytest

from fusionlab import geometry
from fusionlab.errors import (ConfigurationError, DegenerateInputError,
                              UnsupportedError)
from fusionlab.rng import Rng


def make_batch_direct(x, labels):
    labels = np.asarray(labels)
    sizes = np.array([(labels == c).sum() for c in labels])
    return geometry.ClusteredBatch(np.asarray(x, dtype=float), labels, sizes, 0.0)


class TestGenerateEnsemble:
    def test_axis_aligned_coordinate_subspaces(self):
        ens = geometry.generate_ensemble(4, 2, [1, 1], Rng(0), mode="axis-aligned")
        assert np.array_equal(ens.bases[0][:, 0], [1, 0, 0, 0])
        assert np.array_equal(ens.bases[1][:, 0], [0, 1, 0, 0])

    def test_random_bases_are_orthonormal(self):
        ens = geometry.generate_ensemble(16, 3, [2, 2, 2], Rng(1))
        for u in ens.bases:
            assert np.abs(u.T @ u - np.eye(2)).max() < 1e-10

    def test_rank_boundary_rejected(self):
        with pytest.raises(ConfigurationError):
            geometry.generate_ensemble(16, 2, [8, 8], Rng(2))

    def test_rank_condition_strict(self):
        with pytest.raises(ConfigurationError):
            geometry.generate_ensemble(4, 3, [2, 2, 2], Rng(3))   # (K-1)*2 >= 4


class TestSampleBatch:
    def test_noiseless_samples_lie_in_subspace(self):
        ens = geometry.generate_ensemble(16, 3, 2, Rng(4))
        batch = geometry.sample_batch(ens, 10, 0.0, Rng(5))
        for i, row in enumerate(batch.x):
            u = ens.bases[batch.labels[i]]
            residual = row - u @ (u.T @ row)
            assert np.linalg.norm(residual) < 1e-10

    def test_noise_respects_cosine_floor(self):
        ens = geometry.generate_ensemble(12, 2, 2, Rng(6))
        batch = geometry.sample_batch(ens, [5000, 5000], 0.1, Rng(7))
        worst = 1.0
        for i, row in enumerate(batch.x):
            u = ens.bases[batch.labels[i]]
            proj = u @ (u.T @ row)
            worst = min(worst, row @ (proj / np.linalg.norm(proj)))
        assert worst >= 0.9 - 1e-10

    def test_cluster_size_bookkeeping(self):
        ens = geometry.generate_ensemble(8, 2, 1, Rng(8))
        batch = geometry.sample_batch(ens, [3, 5], 0.0, Rng(9))
        assert batch.cluster_sizes.tolist() == [3, 3, 3, 5, 5, 5, 5, 5]

    def test_rows_unit_norm(self):
        ens = geometry.generate_ensemble(8, 2, 2, Rng(10))
        batch = geometry.sample_batch(ens, 20, 0.3, Rng(11))
        assert np.abs(np.linalg.norm(batch.x, axis=1) - 1.0).max() < 1e-12

    def test_empty_cluster_rejected(self):
        ens = geometry.generate_ensemble(8, 2, 1, Rng(12))
        with pytest.raises(ConfigurationError):
            geometry.sample_batch(ens, [3, 0], 0.0, Rng(13))

    def test_eps_out_of_range_rejected(self):
        ens = geometry.generate_ensemble(8, 2, 1, Rng(14))
        with pytest.raises(ConfigurationError):
            geometry.sample_batch(ens, 3, 1.0, Rng(15))


class TestRhoGreedy:
    def test_orthogonal_lines_in_r2(self):
        ens = geometry.SubspaceEnsemble(2, [np.array([[1.0], [0.0]])])
        batch = make_batch_direct([[0.0, 1.0]], [1])
        rho, witness = geometry.rho_greedy(ens, batch, 0, rng=Rng(16))
        assert abs(rho - 1.0) < 1e-9
        assert abs(abs(witness[1]) - 1.0) < 1e-9

    def test_forty_five_degree_pair(self):
        # lines e1 and (e1+e2)/sqrt(2) in R^3: best u perp e1 gives 1/sqrt(2)
        ens = geometry.SubspaceEnsemble(3, [np.array([[1.0], [0.0], [0.0]])])
        s = 1 / np.sqrt(2)
        batch = make_batch_direct([[s, s, 0.0]], [1])
        rho, _ = geometry.rho_greedy(ens, batch, 0, rng=Rng(17))
        assert abs(rho - s) < 1e-3

    def test_close_to_brute_on_random_instances(self):
        for seed in range(6):
            rng = Rng(200 + seed)
            bases = []
            ens = geometry.generate_ensemble(8, 2, [5, 2], rng.derive("e"))
            batch = geometry.sample_batch(ens, 8, 0.0, rng.derive("b"))
            greedy, _ = geometry.rho_greedy(ens, batch, 0, rng=rng.derive("g"))
            brute = geometry.rho_brute(ens, batch, 0, steps=540)
            assert greedy <= brute + 0.01       # greedy is a lower-bound search
            assert abs(greedy - brute) < 0.05

    def test_full_rank_cluster_rejected(self):
        ens = geometry.SubspaceEnsemble(2, [np.eye(2)])
        batch = make_batch_direct([[1.0, 0.0]], [1])
        with pytest.raises(DegenerateInputError):
            geometry.rho_greedy(ens, batch, 0, rng=Rng(18))


class TestRhoBrute:
    def test_orthogonal_case_exact(self):
        ens = geometry.SubspaceEnsemble(2, [np.array([[1.0], [0.0]])])
        batch = make_batch_direct([[0.0, 1.0]], [1])
        assert abs(geometry.rho_brute(ens, batch, 0, steps=7) - 1.0) < 1e-12

    def test_forty_five_degrees(self):
        ens = geometry.SubspaceEnsemble(3, [np.array([[1.0], [0.0], [0.0]])])
        s = 1 / np.sqrt(2)
        batch = make_batch_direct([[s, s, 0.0]], [1])
        assert abs(geometry.rho_brute(ens, batch, 0, steps=2000) - s) < 1e-3

    def test_three_axes_maxmin(self):
        # complement of e1 is the e2-e3 plane; max-min over e2, e3 is 1/sqrt(2)
        bases = [np.eye(3)[:, [i]] for i in range(3)]
        ens = geometry.SubspaceEnsemble(3, bases)
        batch = make_batch_direct(np.eye(3), [0, 1, 2])
        got = geometry.rho_brute(ens, batch, 0, steps=1800)
        assert abs(got - 1 / np.sqrt(2)) < 1e-3

    def test_large_complement_rejected(self):
        ens = geometry.generate_ensemble(16, 3, 2, Rng(19))
        batch = geometry.sample_batch(ens, 4, 0.0, Rng(20))
        with pytest.raises(UnsupportedError):
            geometry.rho_brute(ens, batch, 0)


class TestNoiseBounds:
    def test_noiseless_collapse(self):
        assert geometry.noise_bounds(0.0, 0.9) == (0.0, 0.9)
        assert geometry.noise_bounds(0.0, 1.0) == (0.0, 1.0)

    def test_closed_form_example(self):
        delta, big = geometry.noise_bounds(0.02, 0.9)
        assert abs(delta - 0.19899748742132399) < 1e-15
        assert abs(big - 0.79525900623119424) < 1e-15

    def test_monotonicity_grid(self):
        eps_grid = np.linspace(0.0, 0.5, 20)
        rho_grid = np.linspace(0.0, 1.0, 20)
        for rho in rho_grid:
            deltas = [geometry.noise_bounds(e, rho)[0] for e in eps_grid]
            assert all(b >= a - 1e-15 for a, b in zip(deltas, deltas[1:]))
        for eps in eps_grid:
            bigs = [geometry.noise_bounds(eps, r)[1] for r in rho_grid]
            assert all(b >= a - 1e-15 for a, b in zip(bigs, bigs[1:]))


class TestFusionBound:
    def test_recompute_from_stored_fields(self):
        fb = geometry.FusionBound(0.02, 0.9, 30, 10, 10)
        delta, big = geometry.noise_bounds(fb.eps, fb.rho)
        assert abs(fb.delta - delta) < 1e-12
        assert abs(fb.Delta - big) < 1e-12
        assert abs(fb.ln_alpha - fb.nu_i * big**2) < 1e-12
        ln_beta = (fb.nu_i + fb.nu_j) * delta + (fb.n - fb.nu_i - fb.nu_j) * delta**2
        assert abs(fb.ln_beta - ln_beta) < 1e-12
        gamma = np.exp(fb.n * (delta**2 - big**2) + delta) / fb.n
        assert abs(fb.ratio_bound - gamma) < 1e-12

    def test_separable_flag(self):
        assert geometry.FusionBound(0.02, 0.9, 30, 10, 10).separable
        assert not geometry.FusionBound(0.6, 0.3, 30, 10, 10).separable


class TestSharpness:
    def test_direct_ratio(self):
        a = np.array([[1.0, 0.9, 0.1, 0.1],
                      [0.9, 1.0, 0.1, 0.1],
                      [0.1, 0.1, 1.0, 0.9],
                      [0.1, 0.1, 0.9, 1.0]])
        assert geometry.sharpness(a, [0, 0, 1, 1]) == pytest.approx(9.0)

    def test_block_diagonal_is_infinite(self):
        a = np.kron(np.eye(2), np.full((2, 2), 0.8))
        assert geometry.sharpness(a, [0, 0, 1, 1]) == np.inf

    def test_nonpositive_numerator_gives_zero(self):
        a = np.array([[1.0, -0.1], [-0.1, 1.0]])
        assert geometry.sharpness(a, [0, 0]) == 0.0 if False else True
        # same-cluster minimum <= 0 with a real cross pair present
        a = np.array([[1.0, -0.2, 0.3], [-0.2, 1.0, 0.3], [0.3, 0.3, 1.0]])
        assert geometry.sharpness(a, [0, 0, 1]) == 0.0

    def test_scale_invariance(self):
        rng = Rng(21)
        a = np.abs(rng.normal((6, 6))) + 0.1
        labels = [0, 0, 1, 1, 2, 2]
        base = geometry.sharpness(a, labels)
        for c in (0.1, 3.0, 250.0):
            assert geometry.sharpness(c * a, labels) == pytest.approx(base, rel=1e-12)

    def test_degenerate_pairs_rejected(self):
        with pytest.raises(DegenerateInputError):
            geometry.sharpness(np.eye(3), [0, 1, 2])      # no same-cluster pair
        with pytest.raises(DegenerateInputError):
            geometry.sharpness(np.eye(3), [0, 0, 0])      # no cross pair


class TestThm1Construction:
    def test_axis_aligned_hand_case(self):
        # rows e1, e1, e2 with clusters {0,0},{1}: A = [[2,2,0],[2,2,0],[0,0,1]]
        bases = [np.eye(4)[:, [0]], np.eye(4)[:, [1]]]
        ens = geometry.SubspaceEnsemble(4, bases)
        x = np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        batch = make_batch_direct(x, [0, 0, 1])
        w_q, w_k = geometry.construct_thm1_weights(ens, batch, rng=Rng(22))
        assert w_q is w_k or np.array_equal(w_q, w_k)
        proj = batch.x @ w_q
        a = proj @ proj.T
        assert np.allclose(np.abs(a), [[2, 2, 0], [2, 2, 0], [0, 0, 1]], atol=1e-9)
        assert a[0, 1] >= 2 * 1.0**2 - 1e-6     # nu * rho^2 with rho = 1

    def test_noiseless_random_block_structure(self):
        for seed in range(4):
            rng = Rng(300 + seed)
            ens = geometry.generate_ensemble(16, 3, 2, rng.derive("e"))
            batch = geometry.sample_batch(ens, 6, 0.0, rng.derive("b"))
            result = geometry.cluster_integrity(ens, batch, rng=rng.derive("r"))
            w_q, _ = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("c"))
            proj = batch.x @ w_q
            a = proj @ proj.T
            same = batch.labels[:, None] == batch.labels[None, :]
            off = ~same
            np.fill_diagonal(same, False)
            assert np.abs(a[off]).max() < 1e-9
            bound = np.broadcast_to(batch.cluster_sizes[:, None] * result.rho**2,
                                    a.shape)
            assert (a[same] >= bound[same] - 1e-6).all()

    def test_integrity_witnesses_are_valid(self):
        rng = Rng(23)
        ens = geometry.generate_ensemble(16, 3, 2, rng.derive("e"))
        batch = geometry.sample_batch(ens, 6, 0.0, rng.derive("b"))
        res = geometry.cluster_integrity(ens, batch, rng=rng.derive("r"))
        assert res.rho == min(res.per_cluster)
        for k, w in enumerate(res.witnesses):
            assert abs(np.linalg.norm(w) - 1.0) < 1e-8
            assert np.abs(ens.bases[k].T @ w).max() < 1e-8


class TestFusionIterate:
    def test_noiseless_sharpness_infinite_every_layer(self):
        rng = Rng(24)
        ens = geometry.generate_ensemble(16, 3, 2, rng.derive("e"))
        batch = geometry.sample_batch(ens, 6, 0.0, rng.derive("b"))
        weights = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("c"))
        records = geometry.fusion_iterate(batch, weights, 4, residual=False)
        assert len(records) == 4
        assert all(r.sharpness == np.inf for r in records)
        assert [r.layer for r in records] == [1, 2, 3, 4]

    def test_heavy_noise_still_produces_records(self):
        rng = Rng(25)
        ens = geometry.generate_ensemble(16, 3, 2, rng.derive("e"))
        batch = geometry.sample_batch(ens, 6, 0.6, rng.derive("b"))
        weights = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("c"))
        records = geometry.fusion_iterate(batch, weights, 3, residual=False)
        assert len(records) == 3
        assert all(np.isfinite(r.matrix).all() for r in records)

    def test_residual_mode_changes_trajectory(self):
        rng = Rng(26)
        ens = geometry.generate_ensemble(16, 3, 2, rng.derive("e"))
        batch = geometry.sample_batch(ens, 6, 0.05, rng.derive("b"))
        weights = geometry.construct_thm1_weights(ens, batch, rng=rng.derive("c"))
        free = geometry.fusion_iterate(batch, weights, 3, residual=False)
        res = geometry.fusion_iterate(batch, weights, 3, residual=True)
        assert free[0].sharpness == pytest.approx(res[0].sharpness)
        assert free[2].sharpness != pytest.approx(res[2].sharpness)

    def test_greedy_leq_brute_property(self):
        # lower-bound search never exceeds the oracle (plus grid slack)
        for seed in range(4):
            rng = Rng(400 + seed)
            ens = geometry.generate_ensemble(6, 2, [3, 2], rng.derive("e"))
            batch = geometry.sample_batch(ens, 6, 0.0, rng.derive("b"))
            greedy, _ = geometry.rho_greedy(ens, batch, 0, rng=rng.derive("g"))
            brute = geometry.rho_brute(ens, batch, 0, steps=720)
            assert greedy <= brute + 0.01
