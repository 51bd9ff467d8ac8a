"""Attention semantics against the naive two-loop oracle."""

import numpy as np
import pytest

from sckansformer import tensor as T
from sckansformer.attention import MsaParams, attention, msa_forward
from oracles import attention_oracle, fd_grad, rel_err


class TestAttention:
    def test_single_token_returns_v(self):
        rng = np.random.default_rng(0)
        q, k, v = (T.Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        out = attention(q, k, v)
        np.testing.assert_array_equal(out.data, v.data)

    def test_zero_query_gives_column_mean(self):
        rng = np.random.default_rng(1)
        k = T.Tensor(rng.normal(size=(5, 3)))
        v = T.Tensor(rng.normal(size=(5, 3)))
        out = attention(T.Tensor(np.zeros((5, 3))), k, v)
        assert np.abs(out.data - v.data.mean(0)).max() < 1e-12

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(22):
            q = rng.normal(size=(5, 4))
            k = rng.normal(size=(5, 4))
            v = rng.normal(size=(5, 4))
            got = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
            assert np.abs(got - attention_oracle(q, k, v)).max() < 1e-10

    def test_score_rows_sum_to_one(self):
        # with V = I the output rows ARE the score rows
        rng = np.random.default_rng(3)
        n = 6
        q = T.Tensor(rng.normal(scale=3.0, size=(n, 4)))
        k = T.Tensor(rng.normal(scale=3.0, size=(n, 4)))
        probs = attention(q, k, T.Tensor(np.eye(n))).data
        assert np.abs(probs.sum(-1) - 1.0).max() < 1e-9
        assert probs.min() >= 0.0

    def test_convex_hull_property(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(7, 3))
        out = attention(
            T.Tensor(rng.normal(size=(7, 5))), T.Tensor(rng.normal(size=(7, 5))), T.Tensor(v)
        ).data
        eps = 1e-12
        for c in range(3):
            assert out[:, c].min() >= v[:, c].min() - eps
            assert out[:, c].max() <= v[:, c].max() + eps

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            attention(T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((3, 5))), T.Tensor(np.zeros((3, 4))))


class TestMsa:
    def test_single_head_identity_output_projection(self):
        rng = np.random.default_rng(5)
        p = MsaParams(6, 1, rng=rng)
        p.wo.data[:] = np.eye(6)
        x = T.Tensor(rng.normal(size=(4, 6)))
        got = msa_forward(x, p)
        want = attention(T.matmul(x, p.wq), T.matmul(x, p.wk), T.matmul(x, p.wv))
        np.testing.assert_array_equal(got.data, want.data)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        p = MsaParams(8, 2, rng=rng)
        x = rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        out = msa_forward(T.Tensor(x), p).data
        out_perm = msa_forward(T.Tensor(x[perm]), p).data
        assert np.abs(out_perm - out[perm]).max() < 1e-12

    def test_two_heads_match_manual_slices(self):
        rng = np.random.default_rng(7)
        d, h = 8, 2
        p = MsaParams(d, h, rng=rng)
        x = rng.normal(size=(5, d))
        q = x @ p.wq.data
        k = x @ p.wk.data
        v = x @ p.wv.data
        dh = d // h
        parts = [
            attention_oracle(q[:, i * dh : (i + 1) * dh], k[:, i * dh : (i + 1) * dh], v[:, i * dh : (i + 1) * dh])
            for i in range(h)
        ]
        want = np.concatenate(parts, axis=1) @ p.wo.data
        got = msa_forward(T.Tensor(x), p).data
        assert np.abs(got - want).max() < 1e-10

    def test_head_divisibility(self):
        with pytest.raises(T.ConfigError):
            MsaParams(6, 4)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(8)
        p = MsaParams(4, 2, rng=rng)
        x = rng.normal(size=(3, 5, 4))
        batched = msa_forward(T.Tensor(x), p).data
        for i in range(3):
            single = msa_forward(T.Tensor(x[i]), p).data
            assert np.abs(batched[i] - single).max() < 1e-12

    def test_gradcheck_all_inputs(self):
        for seed in (0, 1, 2):
            rng = np.random.default_rng(seed)
            p = MsaParams(4, 2, rng=rng)
            x = rng.normal(size=(3, 4))
            xt = T.Tensor(x, requires_grad=True)
            out = msa_forward(xt, p)
            T.tsum(T.mul(out, out)).backward()

            weights = {"wq": p.wq, "wk": p.wk, "wv": p.wv, "wo": p.wo}

            def loss(x_val=x, **override):
                probe = MsaParams(4, 2, rng=np.random.default_rng(seed))
                for name, arr in override.items():
                    setattr(probe, name, T.Tensor(arr))
                with T.no_grad():
                    o = msa_forward(T.Tensor(x_val), probe)
                return float((o.data**2).sum())

            assert rel_err(xt.grad, fd_grad(lambda v: loss(x_val=v), x)) < 1e-4, f"x seed={seed}"
            for name, w in weights.items():
                err = rel_err(w.grad, fd_grad(lambda v, n=name: loss(**{n: v}), w.data))
                assert err < 1e-4, f"{name} seed={seed}: {err:.2e}"
