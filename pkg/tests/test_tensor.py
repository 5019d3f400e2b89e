import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dfkd import tensor as T
from dfkd.errors import ConfigError, DegenerateBatchError, ShapeError, UsageError


def _loop_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for a in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                    out[a, f, i, j] = acc
    return out


class TestConv:
    def test_ones_center(self):
        out = T.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3), padding=1)
        assert out[0, 0, 1, 1].item() == 9.0

    def test_identity_kernel(self):
        x = torch.randn(2, 3, 5, 5)
        w = torch.eye(3).view(3, 3, 1, 1)
        assert torch.equal(T.conv2d(x, w), x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        ref = _loop_conv(x, w, b, stride, pad)
        out = T.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride, pad).numpy()
        assert np.abs(out - ref).max() < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(torch.ones(1, 2, 3, 3), torch.ones(1, 3, 3, 3))

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            T.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 1, 1), stride=0)


class TestLinear:
    def test_identity(self):
        x = torch.randn(4, 6)
        assert torch.equal(T.linear(x, torch.eye(6), torch.zeros(6)), x)

    def test_zero_weight(self):
        b = torch.arange(3.0)
        out = T.linear(torch.randn(5, 4), torch.zeros(3, 4), b)
        assert torch.equal(out, b.expand(5, 3))

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(10, 8)), rng.normal(size=10)
        ref = np.zeros((4, 10))
        for i in range(4):
            for k in range(10):
                ref[i, k] = b[k] + sum(x[i, f] * w[k, f] for f in range(8))
        out = T.linear(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
        assert np.abs(out - ref).max() < 1e-6

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(torch.ones(2, 3), torch.ones(4, 5))


class TestBatchNorm:
    def test_eval_identity(self):
        x = torch.randn(3, 4, 2, 2, dtype=torch.float64)
        out = T.batch_norm(x, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64),
                           torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64),
                           False, eps=1e-12)
        assert torch.allclose(out, x, atol=1e-10)

    def test_train_symmetric_pair(self):
        x = torch.tensor([0.0, 2.0]).view(2, 1)
        out = T.batch_norm(x, None, None, None, None, True, eps=1e-8)
        assert torch.allclose(out.view(-1), torch.tensor([-1.0, 1.0]), atol=1e-6)

    def test_running_update_rule(self):
        x = torch.randn(8, 2, 3, 3) + 3.0
        rm, rv = torch.zeros(2), torch.ones(2)
        T.batch_norm(x, None, None, rm, rv, True, momentum=0.1)
        bm = x.mean(dim=(0, 2, 3))
        assert torch.allclose(rm, 0.1 * bm, atol=1e-6)

    def test_grad_fd(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        gamma = torch.rand(3, generator=g, dtype=torch.float64) + 0.5
        beta = torch.randn(3, generator=g, dtype=torch.float64)
        proj = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        rep = T.grad_check(lambda a, gm, bt: (T.batch_norm(a, gm, bt, None, None, True) * proj).sum(),
                           [x, gamma, beta])
        assert rep.passed, rep

    def test_eps_rejected(self):
        with pytest.raises(ConfigError):
            T.batch_norm(torch.ones(2, 1), None, None, None, None, True, eps=0.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            T.batch_norm(torch.ones(1, 3, 1, 1), None, None, None, None, True)

    def test_running_stats_converge(self):
        g = torch.Generator().manual_seed(0)
        rm, rv = torch.zeros(4), torch.ones(4)
        for _ in range(200):
            T.batch_norm(torch.randn(64, 4, generator=g), None, None, rm, rv, True)
        assert rm.abs().max() < 0.1 and (rv - 1).abs().max() < 0.2


class TestSmooth:
    def test_constant_unchanged(self):
        x = torch.full((1, 2, 8, 8), 0.3, dtype=torch.float64)
        assert torch.allclose(T.gaussian_smooth(x, 5, 1.0), x, atol=1e-12)

    def test_impulse_gives_stencil(self):
        x = torch.zeros(1, 1, 7, 7, dtype=torch.float64)
        x[0, 0, 3, 3] = 1.0
        out = T.gaussian_smooth(x, 3, 1.0)[0, 0, 2:5, 2:5]
        r = np.array([-1.0, 0.0, 1.0])
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / 2.0)
        assert np.abs(out.numpy() - g / g.sum()).max() < 1e-12

    def test_kernel_sums_to_one(self):
        assert abs(T.gaussian_kernel(5, 1.0, torch.float64).sum().item() - 1.0) < 1e-12

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            T.gaussian_smooth(torch.zeros(1, 1, 4, 4), 4, 1.0)

    def test_grad(self):
        x = torch.rand(1, 2, 5, 5, dtype=torch.float64)
        assert T.grad_check(lambda a: (T.gaussian_smooth(a, 3, 1.0) ** 2).sum(), [x]).passed


class TestSimpleOps:
    def test_relu(self):
        assert T.relu(torch.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]

    def test_relu_grad_at_zero(self):
        x = torch.tensor([0.0], requires_grad=True)
        T.relu(x).sum().backward()
        assert x.grad.item() == 0.0

    def test_avg_pool_constant(self):
        assert torch.all(T.avg_pool2d(torch.full((1, 1, 4, 4), 2.5), 2) == 2.5)

    def test_global_avg_pool(self):
        x = torch.arange(1.0, 17.0).view(1, 1, 4, 4)
        assert T.global_avg_pool(x).item() == pytest.approx(np.mean(np.arange(1, 17)))

    def test_flatten(self):
        assert T.flatten(torch.zeros(2, 3, 4, 5)).shape == (2, 60)


class TestLosses:
    def test_smooth_l1(self):
        assert T.loss_smooth_l1(torch.ones(3), torch.ones(3)).item() == 0.0
        assert T.loss_smooth_l1(torch.tensor([0.5]), torch.tensor([0.0])).item() == 0.125
        assert T.loss_smooth_l1(torch.tensor([3.0]), torch.tensor([0.0])).item() == 2.5

    def test_smooth_l1_shape(self):
        with pytest.raises(ShapeError):
            T.loss_smooth_l1(torch.ones(3), torch.ones(4))

    def test_kd_identical(self):
        z = torch.randn(4, 5)
        assert abs(T.loss_kd_kl(z, z).item()) < 1e-7

    def test_kd_direct_sum(self):
        t = torch.tensor([[math.log(2.0), 0.0]], dtype=torch.float64)
        s = torch.zeros(1, 2, dtype=torch.float64)
        p = np.array([2 / 3, 1 / 3])
        q = np.array([0.5, 0.5])
        assert abs(T.loss_kd_kl(t, s).item() - float(np.sum(p * np.log(p / q)))) < 1e-7

    def test_kd_grad_student_only(self):
        t = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        s = torch.randn(3, 4, dtype=torch.float64)
        rep = T.grad_check(lambda a: T.loss_kd_kl(t, a), [s])
        assert rep.passed
        st_ = s.clone().requires_grad_(True)
        T.loss_kd_kl(t, st_).backward()
        assert t.grad is None

    def test_inception_values(self):
        logits = torch.tensor([[0.0, 2.0]], dtype=torch.float64)
        assert T.loss_inception(logits, torch.tensor([0]), 1.0).item() == 1.0
        assert abs(T.loss_inception(logits, torch.tensor([1]), 1.0).item() - math.exp(-2.0)) < 1e-12
        assert abs(T.loss_inception(logits, torch.tensor([1]), 2.0).item() - math.exp(-1.0)) < 1e-12
        assert math.exp(-2.0) == pytest.approx(0.13534, abs=1e-5)
        assert math.exp(-1.0) == pytest.approx(0.36788, abs=1e-5)

    def test_inception_scale(self):
        with pytest.raises(ConfigError):
            T.loss_inception(torch.zeros(1, 2), torch.tensor([0]), 0.0)

    def test_ce_uniform(self):
        assert T.loss_cross_entropy(torch.zeros(3, 7), torch.tensor([0, 3, 6])).item() == pytest.approx(math.log(7))

    def test_ce_label_range(self):
        with pytest.raises(ShapeError):
            T.loss_cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))

    def test_mse(self):
        a = torch.randn(5)
        assert T.loss_mse(a, a).item() == 0.0
        assert T.loss_mse(torch.tensor([0.0, 2.0]), torch.tensor([1.0, 0.0])).item() == 2.5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kd_nonneg(self, seed):
        g = torch.Generator().manual_seed(seed)
        t = torch.randn(3, 6, generator=g, dtype=torch.float64)
        s = torch.randn(3, 6, generator=g, dtype=torch.float64)
        assert T.loss_kd_kl(t, s).item() >= -1e-9
        assert abs(T.loss_kd_kl(t, t + 1.7).item()) < 1e-9


class TestBackward:
    def test_square(self):
        x = torch.tensor(3.0, requires_grad=True)
        T.backward(x * x)
        assert x.grad.item() == 6.0

    def test_accumulates(self):
        x = torch.tensor(3.0, requires_grad=True)
        T.backward(x * x)
        T.backward(x * x)
        assert x.grad.item() == 12.0

    def test_non_scalar(self):
        with pytest.raises(UsageError):
            T.backward(torch.ones(3, requires_grad=True) * 2)

    def test_disconnected_zero(self):
        a = torch.ones(2, requires_grad=True)
        b = torch.ones(2, requires_grad=True)
        T.backward((a * 2).sum() + 0 * b.sum())
        assert torch.all(b.grad == 0)

    def test_two_layer_fd(self):
        g = torch.Generator().manual_seed(3)
        x = torch.randn(4, 5, generator=g, dtype=torch.float64)
        w1 = torch.randn(6, 5, generator=g, dtype=torch.float64)
        w2 = torch.randn(3, 6, generator=g, dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 0])
        f = lambda a, b, c: T.loss_cross_entropy(T.linear(torch.tanh(T.linear(a, b)), c), y)
        assert T.grad_check(f, [x, w1, w2]).passed


class TestOptim:
    def test_sgd_step(self):
        p = torch.zeros(1, requires_grad=True)
        opt = T.make_optimizer("sgd", [p], 0.1, momentum=0.0)
        p.grad = torch.ones(1)
        opt.step()
        assert p.item() == pytest.approx(-0.1)

    def test_sgd_momentum_recurrence(self):
        p = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        opt = T.make_optimizer("sgd", [p], 0.1, momentum=0.9)
        theta, v = 0.0, 0.0
        for g in (1.0, 0.5, -2.0):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step()
            v = 0.9 * v + g
            theta -= 0.1 * v
        assert abs(p.item() - theta) < 1e-12

    def test_adam_recurrence(self):
        p = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        opt = T.make_optimizer("adam", [p], 0.1, betas=(0.9, 0.999))
        b1, b2, eps = 0.9, 0.999, 1e-8
        theta, m, v = 0.0, 0.0, 0.0
        for t, g in enumerate((1.0, 1.0, -0.5), start=1):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= 0.1 * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            assert abs(p.item() - theta) < 1e-7

    def test_adam_zero_grad(self):
        p = torch.zeros(1, requires_grad=True)
        opt = T.make_optimizer("adam", [p], 0.1)
        p.grad = torch.zeros(1)
        opt.step()
        assert abs(p.item()) < 0.1 * 1e-6

    def test_negative_lr(self):
        with pytest.raises(ConfigError):
            T.make_optimizer("sgd", [torch.zeros(1, requires_grad=True)], -0.1)


class TestSchedule:
    def test_warmup_peak(self):
        s = T.LrSchedule(0.1, 100, 10)
        assert s.lr_at(10) == pytest.approx(0.1)
        assert s.lr_at(5) == pytest.approx(0.05)

    def test_cosine_end_and_mid(self):
        s = T.LrSchedule(0.1, 110, 10)
        assert s.lr_at(110) == pytest.approx(0.0, abs=1e-15)
        assert s.lr_at(60) == pytest.approx(0.05)

    def test_step_drop(self):
        s = T.LrSchedule(0.1, 1000, 0, cosine=False, drop_steps=((800, 0.1),))
        assert s.lr_at(799) == pytest.approx(0.1)
        assert s.lr_at(800) == pytest.approx(0.01)
        assert T.lr_at(s, 1000) == pytest.approx(0.01)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            T.LrSchedule(0.1, 10).lr_at(11)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 500), st.floats(0, 1))
    def test_nonnegative(self, total, warm, peak):
        warm = min(warm, total)
        s = T.LrSchedule(peak, total, warm)
        assert all(s.lr_at(k) >= 0 for k in range(0, total + 1, max(total // 20, 1)))


class TestGradCheck:
    def test_linear(self):
        g = torch.Generator().manual_seed(0)
        x = torch.randn(3, 4, generator=g, dtype=torch.float64)
        w = torch.randn(2, 4, generator=g, dtype=torch.float64)
        rep = T.grad_check(lambda a, b: (T.linear(a, b) ** 2).sum(), [x, w], tolerance=1e-6)
        assert rep.passed, rep

    def test_relu_away_from_zero(self):
        x = torch.tensor([-1.0, -0.3, 0.4, 2.0], dtype=torch.float64)
        rep = T.grad_check(lambda a: (T.relu(a) * torch.arange(1.0, 5.0, dtype=torch.float64)).sum(), [x],
                           tolerance=1e-6)
        assert rep.passed

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return g

        rep = T.grad_check(lambda a: Bad.apply(a).sum(), [torch.tensor([3.0], dtype=torch.float64)])
        assert not rep.passed

    def test_requires_float64(self):
        with pytest.raises(UsageError):
            T.grad_check(lambda a: a.sum(), [torch.ones(2)])


def test_verification_mode_switch():
    T.set_verification_mode(True)
    try:
        assert torch.zeros(1).dtype == torch.float64
    finally:
        T.set_verification_mode(False)
    assert torch.zeros(1).dtype == torch.float32


def test_same_seed_bitwise():
    def run():
        torch.manual_seed(7)
        x = torch.randn(4, 3, 8, 8)
        w = torch.randn(5, 3, 3, 3)
        return T.conv2d(x, w, padding=1).sum(dim=(2, 3))

    assert torch.equal(run(), run())
