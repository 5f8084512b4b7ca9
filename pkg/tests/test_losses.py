import numpy as np
import pytest

import fusionlab.autodiff as ad
from fusionlab import losses
from fusionlab.errors import ConfigurationError, DegenerateInputError
from fusionlab.rng import Rng

LOG_1_PLUS_2_OVER_E = 0.55144471393205108906   # log(1 + 2/e), 50-digit mpmath


def kl_reference(q, p, floor=1e-10):
    q = np.maximum(q, 0.0)
    terms = np.where(q > 0, q * (np.log(np.maximum(q, floor)) - np.log(np.maximum(p, floor))), 0.0)
    return terms.sum(axis=1)


def jsd_reference(p, q):
    m = (p + q) / 2.0
    return float((kl_reference(q, m) + kl_reference(p, m)).mean())


class TestBuildTarget:
    def test_class_labels(self):
        t = losses.build_target([0, 0, 1])
        assert np.array_equal(t.y, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert not t.row_normalized

    def test_augmentation_pairs_adjacent(self):
        pairs = losses.adjacent_pairs(4)
        t = losses.build_target(pairs)
        assert np.array_equal(t.y, [[0, 1, 0, 0], [1, 0, 0, 0],
                                    [0, 0, 0, 1], [0, 0, 1, 0]])

    def test_normalized_uniform_over_positives(self):
        t = losses.build_target([0, 0, 0], normalize=True)
        assert np.allclose(t.y, [[0, .5, .5], [.5, 0, .5], [.5, .5, 0]], atol=0)

    def test_all_singleton_normalize_rejected(self):
        with pytest.raises(DegenerateInputError):
            losses.build_target([0, 1, 2], normalize=True)

    def test_zero_diagonal_binary_symmetric(self):
        t = losses.build_target(Rng(0).integers(0, 3, (12,)))
        assert np.array_equal(t.y, t.y.T)
        assert np.all(np.diag(t.y) == 0)
        assert set(np.unique(t.y)) <= {0.0, 1.0}


class TestNtXent:
    def test_two_sample_pair_is_zero(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert float(losses.nt_xent(z, tau=0.7)) == 0.0

    def test_four_sample_hand_value(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        value = float(losses.nt_xent(z, tau=1.0))
        assert abs(value - LOG_1_PLUS_2_OVER_E) < 1e-9

    def test_gradient_matches_finite_differences(self):
        z = Rng(1).normal((8, 5))
        pairs = losses.adjacent_pairs(8)
        tape = ad.Tape()
        zv = tape.var(z)
        (g,) = ad.grad(losses.nt_xent(zv, pairs, 0.2), [zv])
        fd = ad.finite_diff(lambda x: float(losses.nt_xent(x, pairs, 0.2)), z.copy())
        assert ad.relative_error(g, fd) < 1e-4

    def test_row_rescaling_invariance(self):
        z = Rng(2).normal((6, 4))
        scales = np.array([[0.3], [2.0], [11.0], [0.01], [1.0], [5.5]])
        a = float(losses.nt_xent(z, tau=0.2))
        b = float(losses.nt_xent(z * scales, tau=0.2))
        assert abs(a - b) < 1e-12

    def test_zero_norm_row_rejected(self):
        z = np.zeros((4, 3))
        z[0, 0] = 1.0
        with pytest.raises(DegenerateInputError):
            losses.nt_xent(z)

    def test_bad_temperature_rejected(self):
        with pytest.raises(ConfigurationError):
            losses.nt_xent(Rng(3).normal((4, 3)), tau=0.0)


class TestGNormalize:
    def test_single_off_diagonal_mass(self):
        out = np.asarray(losses.g_normalize(np.array([[0.0, 2.0], [2.0, 0.0]])))
        assert out[0, 0] <= 1e-10 / 4.0 + 1e-18
        assert abs(out[0, 1] - 1.0) < 1e-9
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12

    def test_squaring_equalizes_sign(self):
        a = np.array([[5.0, 1.0, -1.0],
                      [1.0, 5.0, 0.0],
                      [-1.0, 0.0, 5.0]])
        out = np.asarray(losses.g_normalize(a))
        assert abs(out[0, 1] - 0.5) < 1e-9
        assert abs(out[0, 2] - 0.5) < 1e-9

    def test_rows_sum_to_one(self):
        out = np.asarray(losses.g_normalize(Rng(4).normal((7, 7))))
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
        assert out.min() > 0.0

    def test_sign_insensitivity_exact(self):
        a = Rng(5).normal((6, 6))
        assert np.array_equal(np.asarray(losses.g_normalize(a)),
                              np.asarray(losses.g_normalize(-a)))


class TestJsd:
    def test_zero_when_distributions_match(self):
        target = losses.build_target([0, 0, 1, 1], normalize=True)
        value = float(losses.jsd_loss(target.y.copy(), target))
        assert 0.0 <= value < 1e-9

    def test_disjoint_support_reaches_two_log_two(self):
        labels = [0, 0, 1, 1]
        target = losses.build_target(labels, normalize=True)
        anti = 1.0 - (np.asarray(labels)[:, None] == np.asarray(labels)[None, :])
        value = float(losses.jsd_loss(anti.astype(float), target))
        assert abs(value - 2.0 * np.log(2.0)) < 1e-8

    def test_matches_reference_and_is_symmetric(self):
        rng = Rng(6)
        a = rng.normal((6, 6))
        target = losses.build_target([0, 0, 1, 1, 2, 2], normalize=True)
        p = np.asarray(losses.g_normalize(a))
        q = target.y
        ref_pq = jsd_reference(p, q)
        ref_qp = jsd_reference(q, p)
        assert abs(ref_pq - ref_qp) < 1e-12                  # role swap
        assert abs(float(losses.jsd_loss(a, target)) - ref_pq) < 1e-12

    def test_nonnegative(self):
        rng = Rng(7)
        target = losses.build_target([0, 0, 1, 1], normalize=True)
        for _ in range(20):
            assert float(losses.jsd_loss(rng.normal((4, 4)), target)) >= 0.0

    def test_scale_invariance_up_to_floor(self):
        a = Rng(8).normal((5, 5))
        target = losses.build_target([0, 0, 1, 1, 1], normalize=True)
        base = float(losses.jsd_loss(a, target))
        for c in (0.1, 0.5, 2.0, 10.0):
            assert abs(float(losses.jsd_loss(c * a, target)) - base) < 1e-6

    def test_unhalved_mixture_variant_differs(self):
        a = Rng(9).normal((4, 4))
        target = losses.build_target([0, 0, 1, 1], normalize=True)
        assert (float(losses.jsd_loss(a, target, mixture="sum"))
                != float(losses.jsd_loss(a, target, mixture="halved")))

    def test_gradient_matches_finite_differences(self):
        a = Rng(10).normal((5, 5))
        target = losses.build_target([0, 0, 1, 1, 1], normalize=True)
        tape = ad.Tape()
        av = tape.var(a)
        (g,) = ad.grad(losses.jsd_loss(av, target), [av])
        fd = ad.finite_diff(lambda x: float(losses.jsd_loss(x, target)), a.copy())
        assert ad.relative_error(g, fd) < 1e-4


class TestKlSoftmax:
    def test_uniform_target_constant_affinity_is_zero(self):
        target = losses.build_target([0, 0, 0, 0], normalize=True)
        value = float(losses.kl_softmax_loss(np.full((4, 4), 3.3), target, tau=0.2))
        assert abs(value) < 1e-9

    def test_matches_nt_xent_with_one_positive_per_row(self):
        rng = Rng(11)
        z = rng.normal((8, 5))
        pairs = losses.adjacent_pairs(8)
        target = losses.build_target(pairs, normalize=True)
        zn = z / np.linalg.norm(z, axis=1, keepdims=True)
        affinity = zn @ zn.T
        kl = float(losses.kl_softmax_loss(affinity, target, 0.2))
        ntx = float(losses.nt_xent(z, pairs, 0.2))
        assert abs(kl - ntx) < 1e-12

    def test_gradient_matches_finite_differences(self):
        a = Rng(12).normal((5, 5))
        target = losses.build_target([0, 0, 1, 1, 1], normalize=True)
        tape = ad.Tape()
        av = tape.var(a)
        (g,) = ad.grad(losses.kl_softmax_loss(av, target, 0.2), [av])
        fd = ad.finite_diff(lambda x: float(losses.kl_softmax_loss(x, target, 0.2)),
                            a.copy())
        assert ad.relative_error(g, fd) < 1e-4


def test_loss_log_append(tmp_path):
    path = tmp_path / "loss_log.csv"
    losses.append_loss_log(path, 0, 0, "nt_xent", 1.25)
    losses.append_loss_log(path, 1, 0, "nt_xent", 1.125)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,epoch,loss_name,value"
    assert lines[1] == "0,0,nt_xent,1.25"
    assert len(lines) == 3
