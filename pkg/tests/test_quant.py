import copy
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dfkd import model as M, quant as Q, tensor as T
from dfkd.datasets import make_procedural
from dfkd.errors import ConfigError, DataError, UsageError


def _params4():
    return Q.QuantParams.make(0.1, 0.0, *Q.signed_range(4))


class TestFakeQuant:
    def test_rounding(self):
        assert Q.fake_quant(torch.tensor([0.26]), _params4()).item() == pytest.approx(0.3)

    def test_saturation(self):
        assert Q.fake_quant(torch.tensor([5.0]), _params4()).item() == pytest.approx(0.7)

    def test_half_away_from_zero(self):
        p = Q.QuantParams.make(0.5, 0.0, *Q.signed_range(4))
        out = Q.fake_quant(torch.tensor([0.25, -0.25, 0.75], dtype=torch.float64), p)
        assert out.tolist() == [0.5, -0.5, 1.0]

    def test_idempotent(self):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(10_000, generator=g) * 4 - 2
        p = Q.affine_params(-1.3, 1.7, 5)
        once = Q.fake_quant(x, p)
        assert torch.equal(Q.fake_quant(once, p), once)

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            Q.QuantParams.make(0.0, 0.0, -8, 7)

    def test_zero_point_range(self):
        with pytest.raises(ConfigError):
            Q.QuantParams.make(0.1, 20.0, 0, 15)

    def test_error_bound_inside_range(self):
        p = Q.affine_params(-1.0, 2.0, 6)
        x = torch.linspace(-1.0, 2.0, 5001, dtype=torch.float64)
        assert (x - Q.fake_quant(x, p)).abs().max() <= float(p.scale) / 2 + 1e-9

    def test_distinct_values(self):
        p = Q.affine_params(-1.0, 1.0, 3)
        out = Q.fake_quant(torch.randn(5000) * 3, p)
        assert len(torch.unique(out)) <= 2**3

    def test_monotone(self):
        p = Q.affine_params(-0.7, 1.3, 4)
        out = Q.fake_quant(torch.linspace(-3, 3, 4001), p)
        assert torch.all(out[1:] >= out[:-1])

    def test_ste_mask_exact(self):
        x = torch.tensor([-2.0, -0.3, 0.0, 0.4, 0.69, 3.0], requires_grad=True)
        Q.fake_quant(x, _params4()).mean().backward()
        inside = torch.tensor([0, 1, 1, 1, 1, 0], dtype=torch.float32)
        assert torch.equal(x.grad, inside / 6)

    def test_ste_disabled(self):
        x = torch.tensor([0.3], requires_grad=True)
        Q.fake_quant(x, _params4(), ste=False).sum().backward()
        assert x.grad.item() == 0.0

    def test_ste_vs_surrogate_fd(self):
        # the STE gradient is the derivative of the clipped identity surrogate
        p = Q.affine_params(-1.0, 1.0, 4)
        lo = (p.qmin - float(p.zero_point)) * float(p.scale)
        hi = (p.qmax - float(p.zero_point)) * float(p.scale)
        x = torch.tensor([-1.4, -0.52, 0.11, 0.83, 1.6], dtype=torch.float64)
        w = torch.arange(1.0, 6.0, dtype=torch.float64)
        xa = x.clone().requires_grad_(True)
        (Q.fake_quant(xa, p) * w).sum().backward()
        rep = T.grad_check(lambda a: (a.clamp(lo, hi) * w).sum(), [x])
        assert rep.passed
        assert torch.allclose(xa.grad, w * ((x >= lo) & (x <= hi)).double())

    def test_two_bit_weights_enumerated(self):
        w = torch.randn(4, 3, 3, 3)
        p = Q.weight_params(w, 2)
        q = Q.fake_quant(w, p) / p.scale
        for c in range(4):
            assert set(torch.round(q[c]).unique().tolist()) <= {-2.0, -1.0, 0.0, 1.0}

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(0.01, 2.0), st.integers(2, 8))
    def test_within_range(self, x, s, bits):
        qmin, qmax = Q.signed_range(bits)
        p = Q.QuantParams.make(s, 0.0, qmin, qmax)
        out = Q.fake_quant(torch.tensor([x], dtype=torch.float64), p).item()
        s = float(p.scale)
        assert qmin * s - 1e-9 <= out <= qmax * s + 1e-9


class TestParams:
    def test_weight_scale(self):
        w = torch.zeros(2, 1, 1, 1)
        w[0] = 0.5
        w[1] = -0.2
        p = Q.weight_params(w, 4)
        assert p.scale.view(-1).tolist() == pytest.approx([0.5 / 7, 0.2 / 7])
        assert torch.all(p.zero_point == 0)

    def test_affine_example(self):
        p = Q.affine_params(-2.0, 3.0, 8)
        assert float(p.scale) == pytest.approx(5 / 255)
        assert float(p.zero_point) == 102

    def test_positive_min_clamped(self):
        p = Q.affine_params(0.5, 3.0, 8)
        assert float(p.zero_point) == p.qmin == 0
        assert float(p.scale) == pytest.approx(3.0 / 255)

    def test_bits_range(self):
        with pytest.raises(ConfigError):
            Q.QuantSpec(1, 8)
        with pytest.raises(ConfigError):
            Q.QuantSpec(8, 9)


class TestEstimator:
    def test_single_chunk(self):
        est = Q.RangeEstimator()
        x = torch.zeros(16, 10)
        x[:, 0], x[:, 1] = -2.0, 3.0
        p = Q.calibrate_layer(est, [x], 8)
        assert (est.amin, est.amax) == (-2.0, 3.0)
        assert float(p.zero_point) == 102

    def test_ema(self):
        est = Q.RangeEstimator()
        est.observe_chunk(0.0, 3.0)
        est.observe_chunk(0.0, 5.0)
        assert est.amax == pytest.approx(3.2)

    def test_chunk_mean_of_sample_extremes(self):
        est = Q.RangeEstimator()
        x = torch.zeros(16, 4)
        x[:, 0] = torch.arange(16.0)
        est.observe(x)
        assert est.amax == pytest.approx(np.mean(np.arange(16.0)))

    def test_partial_chunk_dropped(self):
        est = Q.RangeEstimator()
        est.observe(torch.ones(20, 3))
        assert est.chunks == 1
        est2 = Q.RangeEstimator()
        est2.observe(torch.ones(15, 3))
        with pytest.raises(UsageError):
            est2.finalize(8)

    def test_frozen_rejects(self):
        est = Q.RangeEstimator()
        est.observe(torch.ones(16, 2))
        est.freeze()
        with pytest.raises(UsageError):
            est.observe(torch.ones(16, 2))


@pytest.fixture(scope="module")
def trained():
    data = make_procedural(per_class=20)
    mean, std = data.norm_stats()
    net = M.build_resnet_desk(seed=0, norm_mean=mean, norm_std=std)
    net.train()
    opt = T.make_optimizer("sgd", net.parameters(), 0.05)
    g = torch.Generator().manual_seed(0)
    x, y = data.float_images(), data.label_tensor()
    for _ in range(15):
        idx = torch.randint(0, len(x), (32,), generator=g)
        opt.zero_grad()
        T.loss_cross_entropy(net(x[idx]), y[idx]).backward()
        opt.step()
    net.eval()
    return net, data


class TestModelQuant:
    def test_spec_unknown_layer(self, trained):
        net, _ = trained
        with pytest.raises(ConfigError):
            Q.prepare_student(net, Q.QuantSpec(4, 4, {"nope": (8, 8)}))

    def test_prepare_keeps_teacher(self, trained):
        net, data = trained
        before = copy.deepcopy(net.state_dict())
        st_ = Q.quantize_model(net, Q.QuantSpec(4, 4), data, steps=2, batch=32)
        assert not Q.quant_layers(net)
        assert len(Q.quant_layers(st_)) == 1 + 2 * 3 + 2 + 1
        assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())

    def test_edge_overrides(self, trained):
        net, data = trained
        st_ = Q.prepare_student(net, Q.QuantSpec.with_edge_layers(2, 4, 8))
        bits = {n: (l.weight_bits, l.act_bits) for n, l in Q.quant_layers(st_)}
        assert bits["stem.conv"] == (8, 8) and bits["fc"] == (8, 8) and bits["stage1.0.conv1"] == (2, 4)

    def test_bn_untouched(self, trained):
        net, data = trained
        st_ = Q.quantize_model(net, Q.QuantSpec(4, 4), data, steps=2, batch=32)
        for (_, a), (_, b) in zip(M.bn_layers(net), M.bn_layers(st_)):
            assert torch.equal(a.running_mean, b.running_mean)

    def test_8bit_close_to_fp32(self, trained):
        net, data = trained
        st_ = Q.quantize_model(net, Q.QuantSpec(8, 8), data, steps=4, batch=32)
        x = data.float_images()[:64]
        with torch.no_grad():
            assert (net(x).argmax(1) == st_.eval()(x).argmax(1)).float().mean() > 0.95

    def test_empty_calib(self, trained):
        net, data = trained
        with pytest.raises(DataError):
            Q.quantize_model(net, Q.QuantSpec(8, 8), data.subset([]), steps=1, batch=4)

    def test_freeze_requires_calibration(self, trained):
        net, _ = trained
        with pytest.raises(UsageError):
            Q.freeze_activation_ranges(Q.prepare_student(net, Q.QuantSpec(8, 8)))

    def test_frozen_ranges_and_live_weight_scales(self, trained):
        net, data = trained
        st_ = Q.freeze_activation_ranges(Q.quantize_model(net, Q.QuantSpec(4, 4), data, steps=2, batch=32))
        acts = Q.activation_state(st_)
        layer = st_.stage1[0].conv1
        w_scale = Q.weight_params(layer.weight, layer.weight_bits).scale.clone()
        opt = T.make_optimizer("sgd", st_.parameters(), 0.1)
        st_.train()
        for _ in range(3):
            opt.zero_grad()
            st_(data.float_images()[:16]).pow(2).mean().backward()
            opt.step()
        assert Q.activation_state(st_) == acts
        assert not torch.equal(Q.weight_params(layer.weight, layer.weight_bits).scale, w_scale)
        with pytest.raises(UsageError):
            layer.estimator.observe(torch.ones(16, 2))

    def test_state_round_trip(self, trained, tmp_path):
        net, data = trained
        st_ = Q.freeze_activation_ranges(
            Q.quantize_model(net, Q.QuantSpec.with_edge_layers(2, 4, 8), data, steps=2, batch=32))
        M.save_weights(st_, tmp_path / "s.dfkd")
        state = json.loads(json.dumps(Q.quant_state(st_)))
        back = Q.restore_student(M.load_weights(tmp_path / "s.dfkd"), state)
        assert Q.activation_state(back) == Q.activation_state(st_)
        assert Q.ranges_frozen(back)
        x = data.float_images()[:8]
        with torch.no_grad():
            assert torch.equal(back.eval()(x), st_.eval()(x))
