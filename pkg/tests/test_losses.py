import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dancelab import numkernel as nk
from dancelab.losses import (AUTO, LossConfig, cls_loss, entropy_from_logits, es_loss,
                             es_loss_from_logits, es_terms, nc_distribution, nc_entropy, nc_loss,
                             resolve_rho, total_loss)
from gradcheck import (check_cls, check_ent, check_es_logits, check_es_probs, check_nc_composite,
                       run_checks)


def unit(rng, n, d):
    return nk.l2_normalize_rows(rng.normal(size=(n, d)))[0]


def scalar_entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


class TestRho:
    def test_values(self):
        assert resolve_rho(2) == pytest.approx(0.34657, abs=1e-5)
        assert resolve_rho(31) == pytest.approx(math.log(31) / 2, abs=1e-15)
        assert resolve_rho(31) == pytest.approx(1.71699, abs=1e-5)

    @pytest.mark.parametrize("K", [2, 3, 10, 31, 1000])
    def test_below_log_k(self, K):
        assert resolve_rho(K) < math.log(K)

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            resolve_rho(1)

    def test_auto_binding(self):
        assert LossConfig().bind_rho(4) == resolve_rho(4)
        assert LossConfig(rho=0.3).bind_rho(4) == 0.3
        assert LossConfig().rho == AUTO


class TestCls:
    def test_onehot_zero(self):
        loss, _ = cls_loss(np.array([[1000.0, 0.0, 0.0]]), [0])
        assert loss == 0.0

    def test_uniform_log_k(self):
        loss, _ = cls_loss(np.zeros((3, 5)), [0, 2, 4])
        assert loss == pytest.approx(math.log(5), abs=1e-14)

    def test_hand_oracle(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(3, 4))
        y = [2, 0, 3]
        ref = 0.0
        for row, label in zip(Z.tolist(), y):
            ref -= row[label] - math.log(sum(math.exp(v) for v in row))
        assert cls_loss(Z, y)[0] == pytest.approx(ref / 3, abs=1e-13)

    def test_gradient_formula(self):
        Z = np.array([[0.5, -1.0, 2.0]])
        _, g = cls_loss(Z, [1])
        p = nk.softmax_rows(Z)
        np.testing.assert_allclose(g, p - [[0, 1, 0]], atol=1e-15)

    def test_fd(self):
        assert max(run_checks(check_cls)) <= 1e-4

    def test_label_range(self):
        with pytest.raises(ValueError):
            cls_loss(np.zeros((2, 3)), [0, 3])


class TestNcDistribution:
    def test_symmetric_pair(self):
        f = np.array([[1.0, 0.0, 0.0]])
        F = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        P = nc_distribution(f, F, 0.05, [0])
        np.testing.assert_allclose(P, [[0.0, 0.5, 0.5]], atol=1e-15)

    def test_coincident_candidate_closed_form(self):
        # cosine gap 0.1 at tau 0.05 gives 1 / (1 + e^-2) against one rival
        c = 0.9
        f = np.array([[1.0, 0.0]])
        F = np.array([[0.0, 1.0], [1.0, 0.0], [c, math.sqrt(1 - c * c)]])
        P = nc_distribution(f, F, 0.05, [0])
        assert P[0, 1] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)
        # a gap of 0.4 is enough for 0.999
        c = 0.6
        F[2] = [c, math.sqrt(1 - c * c)]
        assert nc_distribution(f, F, 0.05, [0])[0, 1] >= 0.999

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.5, 2.0]))
    def test_rows_normalized_self_zero(self, seed, tau):
        rng = np.random.default_rng(seed)
        B, N, K, d = 4, 7, 3, 5
        f = unit(rng, B, d)
        F = np.vstack([unit(rng, N, d), unit(rng, K, d)])
        idx = rng.choice(N, B, replace=False)
        P = nc_distribution(f, F, tau, idx)
        assert np.all(P[np.arange(B), idx] == 0.0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P >= 0)

    def test_errors(self):
        f, F = np.eye(2)[:1], np.eye(2)
        with pytest.raises(nk.ParameterError):
            nc_distribution(f, F, 0.0, [0])
        with pytest.raises(IndexError):
            nc_distribution(f, F, 0.05, [2])
        with pytest.raises(ValueError):
            nc_distribution(f, F, 0.05, [0, 1])


class TestNcLoss:
    @pytest.mark.parametrize("M", [2, 5, 30])
    def test_uniform_rows_log_m(self, M):
        d = M + 2
        F = np.eye(d)[1:M + 2]            # self slot + M candidates, all orthogonal to f
        f = np.eye(d)[:1]
        loss, *_ = nc_loss(f, F, 0.05, [0], M + 1)
        assert abs(loss - math.log(M)) <= 1e-10

    def test_onehot_rows_zero(self):
        P = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        assert nc_entropy(P) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        N, K = 6, 3
        f = unit(rng, 3, 4)
        F = np.vstack([unit(rng, N, 4), unit(rng, K, 4)])
        loss, *_ = nc_loss(f, F, 0.05, [0, 1, 2], N)
        assert 0.0 <= loss <= math.log(N + K - 1) + 1e-12

    def test_prototype_grad_only(self):
        rng = np.random.default_rng(1)
        N, K = 5, 2
        _, _, g_proto, _ = nc_loss(unit(rng, 2, 3), np.vstack([unit(rng, N, 3), unit(rng, K, 3)]),
                                   0.1, [0, 1], N)
        assert g_proto.shape == (K, 3)

    def test_composite_fd(self):
        assert max(run_checks(check_nc_composite)) <= 1e-4

    def test_self_reinforcement(self):
        """A step on L_nc keeps a concentrated row concentrated."""
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(50):
            d, N = 4, 6
            V = unit(rng, N, d)
            f = nk.l2_normalize_rows(V[1:2] + 0.05 * rng.normal(size=(1, d)))[0]
            F = np.vstack([V, unit(rng, 2, d)])
            P = nc_distribution(f, F, 0.05, [0])
            if P.max() <= 0.9:
                continue
            _, g, _, _ = nc_loss(f, F, 0.05, [0], N)
            f2 = nk.l2_normalize_rows(f - 1e-3 * g)[0]
            assert nc_distribution(f2, F, 0.05, [0]).max() >= P.max()
            checked += 1
        assert checked >= 20


class TestEs:
    def test_uniform_k4(self):
        loss, _ = es_loss(np.full((1, 4), 0.25), resolve_rho(4), 0.5)
        assert loss == pytest.approx(-0.69315, abs=1e-5)

    def test_confident_k4(self):
        p = np.array([[0.97, 0.01, 0.01, 0.01]])
        H = scalar_entropy(p[0])
        assert H == pytest.approx(0.16771, abs=1e-5)
        loss, g = es_loss(p, resolve_rho(4), 0.5)
        assert loss == pytest.approx(-0.52544, abs=1e-4)
        # a small step against the gradient lowers the entropy further
        q = p - 1e-4 * g
        q = q / q.sum()
        assert scalar_entropy(q[0]) < H

    def test_margin_gate(self):
        rho = resolve_rho(4)
        # H = ln 2 lies within 0.5 of rho
        loss, g = es_loss(np.array([[0.5, 0.5, 0.0, 0.0]]), rho, 0.5)
        assert loss == 0.0 and not g.any()

    def test_boundary_subgradient_zero(self):
        contrib, dH = es_terms(np.array([1.5, 0.5]), 1.0, 0.5)
        assert contrib.tolist() == [0.0, 0.0] and dH.tolist() == [0.0, 0.0]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_nonpositive(self, seed, m):
        rng = np.random.default_rng(seed)
        P = nk.softmax_rows(rng.normal(size=(5, 4)) * 3)
        loss, _ = es_loss(P, resolve_rho(4), m)
        assert loss <= 0.0

    def test_step_increases_separation(self):
        rng = np.random.default_rng(3)
        rho, m = resolve_rho(5), 0.3
        for _ in range(20):
            Z = rng.normal(size=(6, 5)) * 2
            _, g, H = es_loss_from_logits(Z, rho, m)
            out = np.abs(H - rho) > m + 1e-3
            if not out.any():
                continue
            _, _, H2 = es_loss_from_logits(Z - 1e-3 * g, rho, m)
            assert np.sum(np.abs(H2 - rho)[out]) > np.sum(np.abs(H - rho)[out])

    def test_logits_matches_probs(self):
        Z = np.random.default_rng(4).normal(size=(5, 4)) * 2
        a, _, _ = es_loss_from_logits(Z, 0.7, 0.2)
        b, _ = es_loss(nk.softmax_rows(Z), 0.7, 0.2)
        assert a == pytest.approx(b, abs=1e-12)

    def test_fd(self):
        assert max(run_checks(check_es_probs)) <= 1e-4
        assert max(run_checks(check_es_logits)) <= 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            es_loss(np.full((1, 2), 0.5), 0.0, 0.5)
        with pytest.raises(ValueError):
            es_loss(np.full((1, 2), 0.5), 0.3, -0.1)


class TestEntropyTerm:
    def test_value(self):
        H, _ = entropy_from_logits(np.zeros((2, 3)))
        assert H == pytest.approx(math.log(3), abs=1e-14)

    def test_fd(self):
        assert max(run_checks(check_ent)) <= 1e-4


class TestTotal:
    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, -0.5, 0.05).total == pytest.approx(1.075, abs=1e-12)

    def test_lambda_zero(self):
        assert total_loss(0.7, 5.0, -1.0, 0.0).total == 0.7

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, 1.0, -0.1)
