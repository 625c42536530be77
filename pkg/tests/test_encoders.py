import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mclatent.encoders import (
    PATCH_DIM,
    TeacherState,
    copy_encoder,
    ema_params,
    ema_update,
    embed,
    encode,
    init_encoder,
    positional,
)
from mclatent.errors import ConfigError, StructureError
from mclatent.numerics import tensor as T


def _enc(seed=0, d=16, depth=2, heads=4, grid=(6, 2)):
    return init_encoder(d, depth, heads, grid, np.random.default_rng(seed))


def _positions(grid):
    return np.array([(r, c) for r in range(grid[0]) for c in range(grid[1])])


class TestEmbedding:
    def test_shapes(self):
        enc = _enc()
        pos = _positions(enc.grid)
        x = np.random.default_rng(1).normal(size=(3, len(pos), PATCH_DIM))
        z = encode(embed(x, pos, enc), enc)
        assert z.shape == (3, 12, 16)

    def test_position_out_of_grid(self):
        enc = _enc()
        with pytest.raises(ConfigError):
            positional(enc.params["pos"], np.array([[6, 0]]), enc.grid)
        with pytest.raises(ConfigError):
            positional(enc.params["pos"], np.array([[0, -1]]), enc.grid)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            init_encoder(10, 1, 4, (2, 2), np.random.default_rng(0))

    def test_positional_lookup(self):
        enc = _enc()
        table = enc.params["pos"].data
        got = positional(enc.params["pos"], np.array([[2, 1], [0, 0], [2, 1]]), enc.grid).data
        np.testing.assert_array_equal(got, table[[2, 0, 2], [1, 0, 1]])

    def test_repeated_positions_accumulate_gradient(self):
        enc = _enc()
        out = positional(enc.params["pos"], np.array([[1, 1], [1, 1]]), enc.grid)
        T.backward(T.tsum(out), [enc.params["pos"]])
        assert np.all(enc.params["pos"].grad[1, 1] == 2.0)
        assert enc.params["pos"].grad.sum() == 2.0 * 16

    def test_final_norm_rows(self):
        enc = _enc()
        pos = _positions(enc.grid)
        z = encode(embed(np.random.default_rng(2).normal(size=(len(pos), PATCH_DIM)), pos, enc), enc).data
        np.testing.assert_allclose(z.mean(-1), 0, atol=1e-12)


class TestStudentTeacher:
    def test_copy_then_compare(self):
        enc = _enc()
        teacher = copy_encoder(enc)
        pos = _positions(enc.grid)
        x = np.random.default_rng(3).normal(size=(2, 5, PATCH_DIM))
        idx = np.array([0, 3, 4, 7, 11])
        a = encode(embed(x, pos[idx], enc), enc).data
        b = encode(embed(x, pos[idx], teacher), teacher).data
        assert np.array_equal(a, b)

    def test_copy_is_independent(self):
        enc = _enc()
        teacher = copy_encoder(enc)
        teacher.params["embed.weight"].data[0, 0] += 1.0
        assert enc.params["embed.weight"].data[0, 0] != teacher.params["embed.weight"].data[0, 0]

    def test_token_permutation_equivariance(self):
        enc = _enc()
        pos = _positions(enc.grid)
        x = np.random.default_rng(4).normal(size=(len(pos), PATCH_DIM))
        perm = np.random.default_rng(5).permutation(len(pos))
        a = encode(embed(x, pos, enc), enc).data
        b = encode(embed(x[perm], pos[perm], enc), enc).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_teacher_never_gets_gradient(self):
        enc = _enc()
        teacher = copy_encoder(enc)
        pos = _positions(enc.grid)
        x = np.random.default_rng(6).normal(size=(len(pos), PATCH_DIM))
        with T.no_grad():
            target = encode(embed(x, pos, teacher), teacher)
        pred = encode(embed(x + 0.1, pos, enc), enc)
        loss = T.tsum(T.square(pred - target.detach()))
        T.backward(loss, enc.params.values())
        assert all(not np.any(p.grad) if p.grad is not None else True for p in teacher.params.values())
        assert any(np.any(p.grad) for p in enc.params.values())


def _dyadic(rng, shape, bits=10):
    return rng.integers(-(2**bits), 2**bits, size=shape) / 2.0**bits


class TestEmaLaws:
    def test_lambda_one_unchanged(self):
        enc, other = _enc(0), _enc(1)
        teacher = TeacherState(copy_encoder(other))
        before = {k: v.data.copy() for k, v in teacher.params.params.items()}
        ema_update(teacher, enc, 1.0)
        assert all(np.array_equal(before[k], v.data) for k, v in teacher.params.params.items())

    def test_lambda_zero_copies(self):
        enc, other = _enc(0), _enc(1)
        teacher = TeacherState(copy_encoder(other))
        ema_update(teacher, enc, 0.0)
        assert all(np.array_equal(enc.params[k].data, v.data) for k, v in teacher.params.params.items())

    def test_fixed_point(self):
        enc = _enc()
        teacher = TeacherState(copy_encoder(enc))
        ema_update(teacher, enc, 0.9937)
        assert all(np.array_equal(enc.params[k].data, v.data) for k, v in teacher.params.params.items())

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 64))
    def test_contraction_exact(self, seed, lam_num):
        rng = np.random.default_rng(seed)
        lam = lam_num / 64.0
        theta = {"w": T.parameter(_dyadic(rng, (5, 7)))}
        gamma = {"w": T.parameter(_dyadic(rng, (5, 7)))}
        gap = np.abs(gamma["w"].data - theta["w"].data).max()
        ema_params(gamma, theta, lam)
        assert np.abs(gamma["w"].data - theta["w"].data).max() == lam * gap

    def test_contraction_general_floats(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            lam = float(rng.uniform())
            theta = {"w": T.parameter(rng.normal(size=(4, 4)))}
            gamma = {"w": T.parameter(rng.normal(size=(4, 4)))}
            gap = np.abs(gamma["w"].data - theta["w"].data).max()
            ema_params(gamma, theta, lam)
            assert np.abs(gamma["w"].data - theta["w"].data).max() == pytest.approx(lam * gap, rel=1e-14, abs=1e-300)

    def test_mismatch(self):
        a = {"w": T.parameter(np.zeros((2, 2)))}
        with pytest.raises(StructureError):
            ema_params(a, {"v": T.parameter(np.zeros((2, 2)))}, 0.5)
        with pytest.raises(StructureError):
            ema_params(a, {"w": T.parameter(np.zeros((2, 3)))}, 0.5)
        with pytest.raises(ConfigError):
            ema_params(a, {"w": T.parameter(np.zeros((2, 2)))}, 1.5)
