import math
import time

import numpy as np
import pytest
import torch

from printforge import numcore as nc


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


class TestPrimitives:
    def test_conv2d_identity_kernel(self):
        x = randn(1, 1, 8, 8)
        k = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        k[0, 0, 1, 1] = 1.0
        y = nc.conv2d(x, k)
        assert torch.allclose(y, x)

    def test_conv2d_stride2_shape(self):
        y = nc.conv2d(randn(2, 3, 8, 8), torch.zeros(4, 3, 3, 3, dtype=torch.float64),
                      stride=2)
        assert tuple(y.shape) == (2, 4, 4, 4)

    def test_conv2d_shape_mismatch(self):
        with pytest.raises(nc.ShapeMismatch):
            nc.conv2d(randn(1, 2, 8, 8), torch.zeros(4, 3, 3, 3, dtype=torch.float64))

    def test_linear_mismatch(self):
        with pytest.raises(nc.ShapeMismatch):
            nc.linear(randn(2, 5), torch.zeros(3, 4, dtype=torch.float64))

    def test_softmax_rows_sum(self):
        q, k, v = randn(2, 6, 8, seed=1), randn(2, 4, 8, seed=2), randn(2, 4, 8, seed=3)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(8), dim=-1)
        assert torch.allclose(w.sum(-1), torch.ones(2, 6, dtype=torch.float64),
                              atol=1e-6)
        out = nc.softmax_attention(q, k, v)
        assert torch.allclose(out, w @ v, atol=1e-9)

    def test_attention_kv_permutation(self):
        q, k, v = randn(1, 5, 8, seed=4), randn(1, 3, 8, seed=5), randn(1, 3, 8, seed=6)
        perm = torch.tensor([2, 0, 1])
        a = nc.softmax_attention(q, k, v)
        b = nc.softmax_attention(q, k[:, perm], v[:, perm])
        assert torch.allclose(a, b, atol=1e-10)

    def test_group_norm_statistics(self):
        x = randn(2, 16, 6, 6, seed=7)
        y = nc.group_norm(x, 8)
        g = y.reshape(2, 8, 2 * 6 * 6)
        assert torch.all(g.mean(-1).abs() < 1e-5)
        assert torch.all((g.var(-1, unbiased=False) - 1).abs() < 1e-4)

    def test_mse_self_zero(self):
        x = randn(3, 4)
        loss = nc.mse_loss(x, x.detach())
        loss.backward()
        assert float(loss.detach()) == 0.0
        assert torch.all(x.grad == 0)

    def test_silu_gradient_at_zero(self):
        x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        nc.silu(x).sum().backward()
        assert float(x.grad) == pytest.approx(0.5, abs=1e-12)

    def test_add_mismatch(self):
        with pytest.raises(nc.ShapeMismatch):
            nc.add(randn(2, 3), randn(3, 2, seed=1))

    def test_upsample(self):
        x = randn(1, 1, 2, 2)
        y = nc.upsample_nearest(x, 2)
        assert torch.allclose(y[0, 0, :2, :2],
                              x[0, 0, 0, 0].expand(2, 2))


class TestGradientCheck:
    def test_all_primitives(self):
        t0 = time.time()
        checks = [
            (lambda x, w: nc.conv2d(x, w),
             [randn(2, 3, 8, 8, seed=10), randn(4, 3, 3, 3, seed=11)]),
            (lambda x, w: nc.conv2d(x, w, stride=2),
             [randn(2, 3, 8, 8, seed=12), randn(4, 3, 3, 3, seed=13)]),
            (lambda x, w, b: nc.linear(x, w, b),
             [randn(4, 6, seed=14), randn(5, 6, seed=15), randn(5, seed=16)]),
            (lambda x: nc.group_norm(x, 4),
             [randn(2, 8, 5, 5, seed=17)]),
            (lambda x: nc.silu(x), [randn(3, 7, seed=18)]),
            (lambda q, k, v: nc.softmax_attention(q, k, v),
             [randn(2, 5, 6, seed=19), randn(2, 4, 6, seed=20),
              randn(2, 4, 6, seed=21)]),
            (lambda x: nc.upsample_nearest(x), [randn(1, 2, 4, 4, seed=22)]),
            (lambda a, b: nc.add(a, b), [randn(3, 4, seed=23), randn(3, 4, seed=24)]),
            (lambda a, b: nc.concat([a, b]),
             [randn(2, 3, 2, 2, seed=25), randn(2, 5, 2, 2, seed=26)]),
            (lambda p, t: nc.mse_loss(p, t),
             [randn(4, 4, seed=27), randn(4, 4, seed=28)]),
        ]
        for fn, inputs in checks:
            err = nc.gradient_check(fn, inputs)
            assert err < 1e-4, (fn, err)
        assert time.time() - t0 < 120

    def test_linear_exhaustive_small(self):
        x, w = randn(4, 4, seed=30), randn(4, 4, seed=31)
        err = nc.gradient_check(lambda a, b: nc.linear(a, b), [x, w],
                                n_samples=32)
        assert err < 1e-6


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = torch.ones(3)
        p.grad = torch.zeros(3)
        nc.adam_step({"p": p}, nc.AdamState(), lr=0.1)
        assert torch.all(p == 1.0)

    def test_constant_gradient_rate(self):
        p = torch.zeros(1)
        state = nc.AdamState()
        vals = []
        for _ in range(200):
            p.grad = torch.ones(1)
            nc.adam_step({"p": p}, state, lr=0.01)
            vals.append(float(p))
        diffs = np.diff(vals[50:])
        assert np.all(diffs < 0)
        assert np.allclose(diffs, -0.01, atol=1e-4)

    def test_first_step_bias_correction(self):
        # with bias correction the very first step moves by ~lr regardless
        # of gradient magnitude
        for g in (0.001, 1.0, 50.0):
            p = torch.zeros(1)
            p.grad = torch.full((1,), g)
            nc.adam_step({"p": p}, nc.AdamState(), lr=0.01)
            assert float(p) == pytest.approx(-0.01, rel=1e-3)

    def test_matches_torch_adam(self):
        g = torch.Generator().manual_seed(0)
        p1 = torch.randn(4, 3, generator=g)
        p2 = p1.clone().requires_grad_(True)
        state = nc.AdamState()
        opt = torch.optim.Adam([p2], lr=0.05)
        for i in range(5):
            grad = torch.randn(4, 3, generator=g)
            p1.grad = grad.clone()
            nc.adam_step({"p": p1}, state, lr=0.05)
            p2.grad = grad.clone()
            opt.step()
        assert torch.allclose(p1, p2.detach(), atol=1e-6)

    def test_non_finite_gradient(self):
        p = torch.zeros(2)
        p.grad = torch.tensor([1.0, float("nan")])
        with pytest.raises(nc.NonFiniteGradient):
            nc.adam_step({"theta": p}, nc.AdamState(), lr=0.1)

    def test_determinism(self):
        def run():
            p = torch.ones(4)
            state = nc.AdamState()
            for i in range(10):
                p.grad = torch.full((4,), 0.5 * (i + 1))
                nc.adam_step({"p": p}, state, lr=0.02)
            return p
        assert torch.equal(run(), run())


class TestCosineLR:
    def test_warmup_and_endpoints(self):
        assert nc.cosine_lr(0, 1000, 1.0, warmup=100) == pytest.approx(0.01)
        assert nc.cosine_lr(99, 1000, 1.0, warmup=100) == pytest.approx(1.0)
        assert nc.cosine_lr(100, 1000, 1.0, warmup=100) == pytest.approx(1.0)
        assert nc.cosine_lr(1000, 1000, 1.0, warmup=100) == pytest.approx(0.0, abs=1e-9)

    def test_monotone_after_warmup(self):
        lrs = [nc.cosine_lr(s, 500, 1e-4) for s in range(100, 500)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.gprnt"
        tensors = {
            "a.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
            "b.bias": np.array([1.5, -2.5], dtype=np.float32),
        }
        meta = {"vocab_checksum": "abc", "schedule": {"kind": "cosine", "T": 400}}
        nc.save_checkpoint(path, tensors, meta)
        loaded, meta2 = nc.load_checkpoint(path)
        assert meta2 == meta
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])

    def test_magic(self, tmp_path):
        assert open_bytes(tmp_path) == b"GPRNT1"

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.gprnt"
        p.write_bytes(b"NOTFMT" + b"\x00" * 32)
        with pytest.raises(ValueError, match="GPRNT1"):
            nc.load_checkpoint(p)

    def test_checksum_stable(self, tmp_path):
        p = tmp_path / "f.bin"
        p.write_bytes(b"hello world")
        assert nc.checksum_file(p) == nc.checksum_file(p)
        assert len(nc.checksum_file(p)) == 16


def open_bytes(tmp_path):
    path = tmp_path / "magic.gprnt"
    nc.save_checkpoint(path, {"x": np.zeros(1, dtype=np.float32)}, {})
    with open(path, "rb") as fh:
        return fh.read(6)
