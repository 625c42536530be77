"""Compiled and numpy kernels must agree; each is also checked on its own
against a direct formula."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mclatent import kernels

IMPLS = kernels.implementations()


def _ids():
    return sorted(IMPLS)


@pytest.fixture(params=_ids())
def impl(request):
    return IMPLS[request.param]


def _annealed_reference(d, tau):
    z = -d / tau
    b = np.exp(z - z.max(axis=1, keepdims=True))
    b /= b.sum(axis=1, keepdims=True)
    loss = (b * d).sum(axis=1)
    g = b * (1.0 - (d - loss[:, None]) / tau)
    return loss, b, g


def _ap_reference(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / hits if hits else float("nan")


class TestMclAnnealed:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.floats(1e-4, 10), st.integers(0, 2**31 - 1))
    def test_matches_reference(self, N, r, tau, seed):
        d = np.random.default_rng(seed).uniform(0, 4, (N, r))
        ref = _annealed_reference(d, tau)
        for impl in IMPLS.values():
            out = kernels.mcl_annealed(d, tau, impl=impl)
            for a, b in zip(out, ref):
                np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)

    def test_backends_bitwise_close(self):
        if len(IMPLS) < 2:
            pytest.skip("compiled extension not built")
        d = np.random.default_rng(1).uniform(0, 4, (500, 5))
        a = kernels.mcl_annealed(d, 0.3, impl=IMPLS["compiled"])
        b = kernels.mcl_annealed(d, 0.3, impl=IMPLS["python"])
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)

    def test_tiny_tau_stays_finite(self, impl):
        d = np.array([[0.5, 0.2, 3.0]])
        loss, b, g = kernels.mcl_annealed(d, 1e-9, impl=impl)
        assert loss[0] == pytest.approx(0.2) and np.all(np.isfinite(g))
        assert b[0].tolist() == [0.0, 1.0, 0.0]


class TestKmeansAssign:
    def test_matches_brute_force(self, impl):
        rng = np.random.default_rng(2)
        x, c = rng.normal(size=(300, 7)), rng.normal(size=(5, 7))
        labels, sq = kernels.kmeans_assign(x, c, impl=impl)
        full = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(labels, full.argmin(1))
        np.testing.assert_allclose(sq, full.min(1), rtol=1e-12)
        assert labels.dtype == np.int64

    def test_ties_to_lowest(self, impl):
        c = np.array([[1.0, 0.0], [-1.0, 0.0]])
        labels, _ = kernels.kmeans_assign(np.zeros((3, 2)), c, impl=impl)
        assert labels.tolist() == [0, 0, 0]


class TestAveragePrecision:
    def test_hand_ranked(self, impl):
        ap = kernels.average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1]), impl=impl)
        assert ap == pytest.approx((1 + 2 / 3) / 2)
        assert ap == pytest.approx(0.8333, abs=1e-4)

    def test_no_positive_is_nan(self, impl):
        assert np.isnan(kernels.average_precision(np.array([0.1, 0.2]), np.array([0, 0]), impl=impl))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31 - 1))
    def test_against_loop(self, n, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(n).astype(float)
        labels = rng.integers(0, 2, n).astype(np.uint8)
        ref = _ap_reference(scores, labels)
        for impl in IMPLS.values():
            got = kernels.average_precision(scores, labels, impl=impl)
            assert (np.isnan(got) and np.isnan(ref)) or got == pytest.approx(ref, rel=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, MCLATENT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from mclatent import kernels; print(kernels.BACKEND)"], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
