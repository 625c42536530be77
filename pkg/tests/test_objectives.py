import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mclatent import objectives as obj
from mclatent.errors import ConfigError, StructureError
from mclatent.numerics import tensor as T
from mclatent.numerics.tensor import Tensor


def _hyps(rng, r, N=4, d=6, B=None):
    shape = (r, N, d) if B is None else (B, r, N, d)
    return T.parameter(rng.normal(size=shape))


class TestNormalizeAndDistances:
    def test_345(self):
        np.testing.assert_allclose(obj.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_stays_zero(self):
        assert np.all(obj.l2_normalize_rows(Tensor(np.zeros((1, 3))), 1e-8).data == 0)

    def test_idempotent(self):
        x = Tensor(np.random.default_rng(0).normal(size=(20, 7)))
        once = obj.l2_normalize_rows(x).data
        np.testing.assert_allclose(obj.l2_normalize_rows(Tensor(once)).data, once, atol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)

    def test_equal_and_antipodal(self):
        z = Tensor([[1.0, 2.0, 3.0]])
        h = Tensor(np.stack([[[1.0, 2.0, 3.0]], [[-1.0, -2.0, -3.0]]]))
        d = obj.distances(h, z).data
        np.testing.assert_allclose(d, [[0.0, 4.0]], atol=1e-12)

    def test_cosine_identity(self):
        rng = np.random.default_rng(1)
        h, z = rng.normal(size=(3, 10, 5)), rng.normal(size=(10, 5))
        d = obj.distances(Tensor(h), Tensor(z)).data
        hn = h / np.linalg.norm(h, axis=-1, keepdims=True)
        zn = z / np.linalg.norm(z, axis=-1, keepdims=True)
        cos = np.einsum("rnd,nd->nr", hn, zn)
        np.testing.assert_allclose(d, 2 - 2 * cos, atol=1e-9)
        assert d.min() >= 0 and d.max() <= 4 + 1e-9


class TestSoftAssign:
    def test_oracle(self):
        b = obj.soft_assign(Tensor([[0.5, 0.2]]), 1.0).data[0]
        mpmath.mp.dps = 30
        e1, e2 = mpmath.exp(-0.5), mpmath.exp(-0.2)
        np.testing.assert_allclose(b, [float(e1 / (e1 + e2)), float(e2 / (e1 + e2))], atol=1e-15)
        np.testing.assert_allclose(b, [0.42556, 0.57444], atol=1e-5)

    def test_hot_limit_uniform(self):
        b = obj.soft_assign(Tensor(np.random.default_rng(0).uniform(0, 4, (5, 4))), 1e9).data
        np.testing.assert_allclose(b, 0.25, atol=1e-6)

    def test_single_hypothesis_is_one(self):
        assert np.all(obj.soft_assign(Tensor([[0.3], [2.0]]), 0.1).data == 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ConfigError):
            obj.soft_assign(Tensor([[0.1, 0.2]]), tau)
        with pytest.raises(ConfigError):
            obj.annealed_pred_loss(Tensor([[0.1, 0.2]]), tau)


class TestPredictionLosses:
    def test_scalar_expansion(self):
        d = Tensor([[0.5, 0.2]])
        loss = obj.mcl_pred_loss(d, obj.soft_assign(d, 1.0)).item()
        assert loss == pytest.approx(0.42556 * 0.5 + 0.57444 * 0.2, abs=1e-4)
        assert loss == pytest.approx(0.32767, abs=1e-4)
        assert obj.annealed_pred_loss(d, 1.0).item() == pytest.approx(loss, abs=1e-15)

    def test_zero_distances(self):
        d = Tensor(np.zeros((4, 3)))
        assert obj.mcl_pred_loss(d, obj.soft_assign(d, 0.3)).item() == 0.0

    def test_r1_is_mean(self):
        d = np.random.default_rng(2).uniform(0, 4, (9, 1))
        assert obj.annealed_pred_loss(Tensor(d), 0.7).item() == pytest.approx(d.mean(), abs=1e-15)

    def test_greedy_examples(self):
        loss, idx = obj.greedy_pred_loss(Tensor([[0.5, 0.2]]))
        assert loss.item() == pytest.approx(0.2) and idx.tolist() == [1]
        loss, idx = obj.greedy_pred_loss(Tensor([[0.3, 0.3], [0.7, 0.7]]))
        assert loss.item() == pytest.approx(0.5) and idx.tolist() == [0, 0]

    def test_fused_matches_composed(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d = rng.uniform(0, 4, (2, 7, 3))
            tau = float(rng.uniform(0.05, 2))
            a = T.parameter(d)
            b = T.parameter(d.copy())
            la = obj.annealed_pred_loss(a, tau)
            lb = obj.mcl_pred_loss(b, obj.soft_assign(b, tau))
            assert la.item() == pytest.approx(lb.item(), rel=1e-13)
            T.backward(la, [a])
            T.backward(lb, [b])
            np.testing.assert_allclose(a.grad, b.grad, rtol=1e-10, atol=1e-14)

    def test_sum_reduction(self):
        d = Tensor(np.random.default_rng(4).uniform(0, 4, (6, 2)))
        assert obj.annealed_pred_loss(d, 0.5, "sum").item() == pytest.approx(6 * obj.annealed_pred_loss(d, 0.5).item())
        with pytest.raises(ConfigError):
            obj.annealed_pred_loss(d, 0.5, "max")

    def test_mean_of_identical_hypotheses_is_plain(self):
        rng = np.random.default_rng(5)
        one = rng.normal(size=(4, 6))
        z = Tensor(rng.normal(size=(4, 6)))
        hyps = Tensor(np.stack([one, one, one]))
        assert obj.mean_pred_loss(hyps, z).item() == pytest.approx(obj.plain_pred_loss(Tensor(one), z).item(), abs=1e-15)

    def test_mean_of_opposite_hypotheses_finite(self):
        h = np.random.default_rng(6).normal(size=(4, 6))
        hyps = T.parameter(np.stack([h, -h]))
        loss = obj.mean_pred_loss(hyps, Tensor(np.ones((4, 6))))
        T.backward(loss, [hyps])
        assert math.isfinite(loss.item()) and np.all(np.isfinite(hyps.grad))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 5), st.floats(1e-3, 10), st.integers(0, 2**31 - 1))
    def test_bound_law(self, N, r, tau, seed):
        d = np.random.default_rng(seed).uniform(0, 4, (N, r))
        greedy = obj.greedy_pred_loss(Tensor(d))[0].item()
        annealed = obj.annealed_pred_loss(Tensor(d), tau).item()
        assert greedy <= annealed + 1e-12
        assert annealed <= d.mean(axis=0).max() + 1e-12

    def test_annealed_limit(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            N, r = int(rng.integers(1, 51)), int(rng.integers(1, 6))
            d = Tensor(rng.uniform(0, 4, (N, r)))
            g, idx = obj.greedy_pred_loss(d)
            assert abs(obj.annealed_pred_loss(d, 1e-6).item() - g.item()) < 1e-5
            assert np.array_equal(np.argmax(obj.soft_assign(d, 1e-6).data, axis=1), idx)

    def test_pred_loss_dispatch(self):
        rng = np.random.default_rng(8)
        h, z = Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(5, 4)))
        for s in obj.STRATEGIES:
            loss, d = obj.pred_loss(s, h, z, 0.5)
            assert d.shape == (5, 2) and math.isfinite(loss.item())
        with pytest.raises(ConfigError):
            obj.pred_loss("softmin", h, z, 0.5)


class TestR1Degeneracy:
    def test_bit_identical(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            N, dim = int(rng.integers(1, 20)), int(rng.integers(2, 9))
            pred, z = rng.normal(size=(N, dim)), Tensor(rng.normal(size=(N, dim)))
            hyps = Tensor(pred[None])
            plain = obj.plain_pred_loss(Tensor(pred), z).item()
            for s in obj.STRATEGIES:
                assert obj.pred_loss(s, hyps, z, float(rng.uniform(0.01, 2)))[0].item() == plain


class TestSelectBest:
    def test_examples(self):
        h = Tensor(np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3))
        best, win = obj.select_best(np.array([[0.1, 0.3], [0.9, 0.2]]), h)
        assert win.tolist() == [0, 1]
        np.testing.assert_array_equal(best.data, [h.data[0, 0], h.data[1, 1]])

    def test_r1_and_ties(self):
        h = Tensor(np.ones((1, 3, 2)))
        assert obj.select_best(np.zeros((3, 1)), h)[1].tolist() == [0, 0, 0]
        assert obj.select_best(np.full((3, 2), 0.5), Tensor(np.ones((2, 3, 2))))[1].tolist() == [0, 0, 0]

    def test_brute_force(self):
        rng = np.random.default_rng(10)
        d = rng.uniform(0, 4, (100, 5))
        _, win = obj.select_best(d, Tensor(rng.normal(size=(5, 100, 3))))
        assert win.tolist() == [min(range(5), key=lambda j: (row[j], j)) for row in d]

    def test_greedy_gradient_reaches_only_winner(self):
        rng = np.random.default_rng(11)
        hyps = T.parameter(rng.normal(size=(3, 8, 4)))
        loss, d = obj.pred_loss("greedy", hyps, Tensor(rng.normal(size=(8, 4))), 1.0)
        T.backward(loss, [hyps])
        _, win = obj.greedy_pred_loss(d)
        for j in range(3):
            for i in range(8):
                if win[i] != j:
                    assert np.all(hyps.grad[j, i] == 0.0)


def _heads(K=5, d=4, seed=0, **kw):
    return obj.init_cls_heads(d, K, np.random.default_rng(seed), std=0.5, **kw)


class TestClassificationHeads:
    def test_temperature_order_enforced(self):
        with pytest.raises(ConfigError):
            _heads(tau_s=0.05, tau_t=0.1)
        with pytest.raises(ConfigError):
            _heads(tau_s=0.1, tau_t=0.0)

    def test_teacher_sharper(self):
        h = _heads(kind="linear")
        z = np.random.default_rng(1).normal(size=(6, 4))
        p_s, p_t, _ = obj.cls_distributions(Tensor(z), Tensor(z), h)
        assert np.all(p_t.data.max(axis=1) > p_s.data.max(axis=1))

    def test_rows_on_simplex(self):
        for kind in obj.HEAD_KINDS:
            h = _heads(kind=kind)
            h.center = np.random.default_rng(2).normal(size=5)
            z = np.random.default_rng(3).normal(size=(2, 7, 4))
            p_s, p_t, _ = obj.cls_distributions(Tensor(z), Tensor(z + 1), h)
            np.testing.assert_allclose(p_s.data.sum(-1), 1, atol=1e-9)
            np.testing.assert_allclose(p_t.data.sum(-1), 1, atol=1e-9)

    def test_centered_uniform_logits(self):
        h = _heads(kind="linear")
        for v in h.teacher.values():
            v.data[...] = 0.0
        h.teacher["head.bias"].data[...] = [1.0, 2.0, 3.0, 4.0, 5.0]
        h.center = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        _, p_t, _ = obj.cls_distributions(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))), h)
        np.testing.assert_allclose(p_t.data, 0.2, atol=1e-15)

    def test_scalar_softmax_k3(self):
        h = _heads(K=3, d=2, kind="linear", tau_s=0.5, tau_t=0.25)
        W = np.array([[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
        for p in (h.student, h.teacher):
            p["head.weight"].data[...] = W
            p["head.bias"].data[...] = 0.0
        h.center = np.array([0.1, 0.0, -0.1])
        z = np.array([[1.0, 2.0]])
        logits = z @ W
        p_s, p_t, _ = obj.cls_distributions(Tensor(z), Tensor(z), h)
        es = [math.exp(v / 0.5) for v in logits[0]]
        et = [math.exp((v - c) / 0.25) for v, c in zip(logits[0], h.center)]
        np.testing.assert_allclose(p_s.data[0], [e / sum(es) for e in es], atol=1e-15)
        np.testing.assert_allclose(p_t.data[0], [e / sum(et) for e in et], atol=1e-15)

    def test_cosine_logits_bounded(self):
        h = _heads(K=9, d=4)
        logits = obj.head_logits(Tensor(np.random.default_rng(4).normal(size=(50, 4)) * 100), h.student, "cosine").data
        assert np.all(np.abs(logits) <= 1 + 1e-12)

    def test_teacher_gets_no_gradient(self):
        h = _heads()
        rng = np.random.default_rng(5)
        z_best = T.parameter(rng.normal(size=(4, 4)))
        z_m = T.parameter(rng.normal(size=(4, 4)))
        p_s, p_t, _ = obj.cls_distributions(z_best, z_m, h)
        loss = obj.cls_loss(p_s, p_t)
        T.backward(loss, [z_best, z_m, *h.student.values(), *h.teacher.values()])
        assert np.any(z_best.grad != 0)
        assert not np.any(z_m.grad)
        assert all(not np.any(v.grad) for v in h.teacher.values())


class TestCenterAndCE:
    def test_rho_one_and_zero(self):
        h = _heads(rho_center=1.0)
        h.center = np.array([1.0, 2, 3, 4, 5])
        logits = np.random.default_rng(0).normal(size=(6, 5))
        obj.update_center(h, logits)
        assert h.center.tolist() == [1.0, 2, 3, 4, 5]
        h.rho_center = 0.0
        obj.update_center(h, logits)
        assert np.array_equal(h.center, logits.mean(axis=0))

    def test_two_step_recurrence(self):
        h = _heads(rho_center=0.9)
        rng = np.random.default_rng(1)
        c0 = rng.normal(size=5)
        h.center = c0.copy()
        a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        obj.update_center(h, a)
        obj.update_center(h, b)
        expect = 0.81 * c0 + 0.09 * a.mean(0) + 0.1 * b.mean(0)
        np.testing.assert_allclose(h.center, expect, rtol=1e-13, atol=1e-15)

    def test_ce_examples(self):
        eye = Tensor(np.eye(3))
        assert obj.cls_loss(eye, eye).item() == 0.0
        u = Tensor(np.full((2, 4), 0.25))
        assert obj.cls_loss(u, u).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_ce_scalar_oracle(self):
        rng = np.random.default_rng(2)
        ps, pt = rng.dirichlet(np.ones(6), size=5), rng.dirichlet(np.ones(6), size=5)
        ref = sum(-pt[i, k] * math.log(ps[i, k]) for i in range(5) for k in range(6)) / 5
        assert obj.cls_loss(Tensor(ps), Tensor(pt)).item() == pytest.approx(ref, rel=1e-13)

    def test_log_clamp(self):
        ps = Tensor([[1.0, 0.0]])
        pt = Tensor([[0.5, 0.5]])
        assert obj.cls_loss(ps, pt).item() == pytest.approx(-0.5 * math.log(1e-12))


class TestCombinedAndEma:
    def test_combined(self):
        p, c = Tensor(0.4), Tensor(1.0)
        assert obj.combined_loss(p, c, 1.0).item() == 0.4
        assert obj.combined_loss(p, c, 0.0).item() == 1.0
        assert obj.combined_loss(p, c, 0.5).item() == pytest.approx(0.7, abs=1e-15)
        with pytest.raises(ConfigError):
            obj.combined_loss(p, c, 1.5)

    def test_breakdown(self):
        win = np.array([0, 2, 2, 1, 2])
        bd = obj.breakdown(Tensor(0.3), Tensor(2.0), 0.25, win, 3)
        assert bd.winner_counts.tolist() == [1, 1, 3]
        assert bd.total == pytest.approx(0.75 * 2.0 + 0.25 * 0.3, abs=1e-12)

    @pytest.mark.parametrize("zeta", [0.0, 0.5, 1.0])
    def test_cls_head_ema(self, zeta):
        h = _heads(zeta=zeta)
        w_s = h.student["head.weight"].data.copy()
        h.teacher["head.weight"].data[...] = 2.0
        obj.ema_update_cls_head(h)
        expect = {0.0: w_s, 1.0: np.full_like(w_s, 2.0), 0.5: (w_s + 2.0) / 2}[zeta]
        np.testing.assert_allclose(h.teacher["head.weight"].data, expect, rtol=0, atol=1e-15)
        if zeta in (0.0, 1.0):
            assert np.array_equal(h.teacher["head.weight"].data, expect)

    def test_cls_head_ema_shape_mismatch(self):
        h = _heads()
        h.teacher["head.weight"] = Tensor(np.zeros((3, 3)))
        with pytest.raises(StructureError):
            obj.ema_update_cls_head(h)


class TestEntropy:
    def test_uniform(self):
        assert obj.mean_entropy(np.full((3, 8), 1 / 8)) == pytest.approx(math.log(8))
        assert obj.marginal_entropy(np.eye(4)) == pytest.approx(math.log(4))
        assert obj.mean_entropy(np.eye(4)) == 0.0
