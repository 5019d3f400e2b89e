"""Simulated uniform quantization with straight-through gradients.

Weights: symmetric per-output-channel, zero point 0, signed range
[-2^(b-1), 2^(b-1) - 1]. Activations (the inputs of every conv / linear
layer): affine per-tensor, unsigned range [0, 2^b - 1], ranges taken from a
chunked running min/max estimator. BN layers stay in float.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import Dataset, standard_augment
from .errors import ConfigError, DataError, UsageError

CHUNK_SIZE = 16
RANGE_MOMENTUM = 0.9


def signed_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def unsigned_range(bits: int) -> tuple[int, int]:
    return 0, 2**bits - 1


def _check_bits(bits):
    if not 2 <= bits <= 8:
        raise ConfigError(f"bit width must be in [2, 8], got {bits}")


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero point plus integer range.

    ``scale`` and ``zero_point`` are tensors broadcastable against the
    quantized tensor: scalars per-tensor, shape (C, 1, ...) per-channel.
    """

    scale: torch.Tensor
    zero_point: torch.Tensor
    qmin: int
    qmax: int

    def __post_init__(self):
        if not torch.all(self.scale > 0):
            raise ConfigError("quantization scale must be > 0")
        if torch.any(self.zero_point < self.qmin) or torch.any(self.zero_point > self.qmax):
            raise ConfigError("zero point outside [qmin, qmax]")

    @classmethod
    def make(cls, scale, zero_point, qmin, qmax):
        return cls(torch.as_tensor(scale, dtype=torch.float32), torch.as_tensor(zero_point, dtype=torch.float32),
                   int(qmin), int(qmax))


class _FakeQuant(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale, zero_point, qmin, qmax, ste):
        q = round_half_away(x / scale) + zero_point
        inside = (q >= qmin) & (q <= qmax)
        ctx.save_for_backward(inside)
        ctx.ste = ste
        return (q.clamp(qmin, qmax) - zero_point) * scale

    @staticmethod
    def backward(ctx, grad):
        (inside,) = ctx.saved_tensors
        if not ctx.ste:
            return torch.zeros_like(grad), None, None, None, None, None
        return grad * inside.to(grad.dtype), None, None, None, None, None


def fake_quant(x: torch.Tensor, params: QuantParams, ste: bool = True) -> torch.Tensor:
    """Quantize-dequantize; with ``ste`` the gradient is 1 inside the range, 0 where clamped."""
    scale = params.scale.to(x.dtype)
    zp = params.zero_point.to(x.dtype)
    return _FakeQuant.apply(x, scale, zp, params.qmin, params.qmax, ste)


def weight_params(weight: torch.Tensor, bits: int) -> QuantParams:
    """Symmetric per-output-channel params: s_c = max|w_c| / (2^(b-1) - 1)."""
    qmin, qmax = signed_range(bits)
    w = weight.detach()
    amax = w.abs().reshape(w.shape[0], -1).amax(dim=1)
    scale = torch.clamp(amax / qmax, min=1e-12).to(torch.float32)
    shape = (-1,) + (1,) * (w.dim() - 1)
    return QuantParams(scale.view(shape), torch.zeros_like(scale).view(shape), qmin, qmax)


def affine_params(amin: float, amax: float, bits: int) -> QuantParams:
    """Per-tensor affine params covering [min(amin, 0), max(amax, 0)]."""
    qmin, qmax = unsigned_range(bits)
    lo, hi = min(amin, 0.0), max(amax, 0.0)
    scale = max((hi - lo) / (qmax - qmin), 1e-12)
    zp = float(round_half_away(torch.tensor(qmin - lo / scale, dtype=torch.float64)).item())
    zp = min(max(zp, qmin), qmax)
    return QuantParams.make(scale, zp, qmin, qmax)


class RangeEstimator:
    """Smoothed dynamic range from 16-sample chunks.

    Each full chunk contributes the mean over its samples of the per-sample
    min and max; chunk values enter an EMA ``r <- m r + (1 - m) chunk``
    initialized by the first chunk. Trailing partial chunks are dropped.
    """

    def __init__(self, chunk_size: int = CHUNK_SIZE, momentum: float = RANGE_MOMENTUM):
        self.chunk_size = chunk_size
        self.momentum = momentum
        self.amin: Optional[float] = None
        self.amax: Optional[float] = None
        self.chunks = 0
        self.frozen = False

    def observe_chunk(self, chunk_min: float, chunk_max: float) -> None:
        if self.frozen:
            raise UsageError("range estimator is frozen")
        if self.chunks == 0:
            self.amin, self.amax = chunk_min, chunk_max
        else:
            m = self.momentum
            self.amin = m * self.amin + (1 - m) * chunk_min
            self.amax = m * self.amax + (1 - m) * chunk_max
        self.chunks += 1

    def observe(self, x: torch.Tensor) -> None:
        if self.frozen:
            raise UsageError("range estimator is frozen")
        x = x.detach()
        flat = x.reshape(x.shape[0], -1)
        mins = flat.amin(dim=1).double()
        maxs = flat.amax(dim=1).double()
        for start in range(0, x.shape[0] - self.chunk_size + 1, self.chunk_size):
            sl = slice(start, start + self.chunk_size)
            self.observe_chunk(mins[sl].mean().item(), maxs[sl].mean().item())

    def finalize(self, bits: int) -> QuantParams:
        if self.chunks == 0:
            raise UsageError("range estimator has not seen a full chunk")
        return affine_params(self.amin, self.amax, bits)

    def freeze(self) -> None:
        self.frozen = True


def calibrate_layer(estimator: RangeEstimator, activations: Iterable[torch.Tensor], bits: int) -> QuantParams:
    for batch in activations:
        estimator.observe(batch)
    return estimator.finalize(bits)


# ---------------------------------------------------------------------------
# quantized layers
# ---------------------------------------------------------------------------

class _QuantMixin:
    """Shared state for fake-quantized conv / linear layers.

    ``mode``: "fp32" (plain float), "calibrate" (float forward, feed the
    input range estimator) or "quant" (fake-quant input and weights).
    The float ``weight`` parameter is the master copy; its quantized view is
    re-derived on every forward.
    """

    def _init_quant(self, weight_bits, act_bits):
        _check_bits(weight_bits)
        _check_bits(act_bits)
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.mode = "fp32"
        self.estimator = RangeEstimator()
        self.act_params: Optional[QuantParams] = None

    def quant_weight(self):
        return fake_quant(self.weight, weight_params(self.weight, self.weight_bits))

    def quant_input(self, x):
        if self.mode == "calibrate":
            self.estimator.observe(x)
            return x
        if self.mode == "quant":
            if self.act_params is None:
                raise UsageError("layer is not calibrated")
            return fake_quant(x, self.act_params)
        return x

    def finalize(self):
        self.act_params = self.estimator.finalize(self.act_bits)
        return self.act_params

    def extra_repr(self):
        return super().extra_repr() + f", w{self.weight_bits}a{self.act_bits}, mode={self.mode}"


class QuantConv2d(_QuantMixin, nn.Conv2d):
    @classmethod
    def from_float(cls, conv: nn.Conv2d, weight_bits: int, act_bits: int):
        q = cls(conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding,
                conv.dilation, conv.groups, conv.bias is not None)
        q.load_state_dict(conv.state_dict())
        q._init_quant(weight_bits, act_bits)
        return q.to(memory_format=torch.channels_last)

    def forward(self, x):
        if self.mode != "quant":
            return nn.Conv2d.forward(self, self.quant_input(x))
        return self._conv_forward(self.quant_input(x), self.quant_weight(), self.bias)


class QuantLinear(_QuantMixin, nn.Linear):
    @classmethod
    def from_float(cls, fc: nn.Linear, weight_bits: int, act_bits: int):
        q = cls(fc.in_features, fc.out_features, fc.bias is not None)
        q.load_state_dict(fc.state_dict())
        q._init_quant(weight_bits, act_bits)
        return q

    def forward(self, x):
        if self.mode != "quant":
            return F.linear(self.quant_input(x), self.weight, self.bias)
        return F.linear(self.quant_input(x), self.quant_weight(), self.bias)


@dataclass
class QuantSpec:
    """#w#a plan with per-layer (weight_bits, act_bits) overrides."""

    weight_bits: int = 8
    act_bits: int = 8
    overrides: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        _check_bits(self.weight_bits)
        _check_bits(self.act_bits)
        self.overrides = {k: (int(v[0]), int(v[1])) for k, v in dict(self.overrides).items()}
        for wb, ab in self.overrides.values():
            _check_bits(wb)
            _check_bits(ab)

    def bits_for(self, name: str) -> tuple[int, int]:
        return self.overrides.get(name, (self.weight_bits, self.act_bits))

    @classmethod
    def with_edge_layers(cls, weight_bits, act_bits, edge_bits, first="stem.conv", last="fc"):
        """Spec whose first and final layers run at ``edge_bits`` for weights and activations."""
        return cls(weight_bits, act_bits, {first: (edge_bits, edge_bits), last: (edge_bits, edge_bits)})


def quant_layers(model: nn.Module) -> list[tuple[str, _QuantMixin]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, _QuantMixin)]


def set_quant_mode(model: nn.Module, mode: str) -> None:
    if mode not in ("fp32", "calibrate", "quant"):
        raise ConfigError(f"unknown quant mode {mode!r}")
    for _, m in quant_layers(model):
        m.mode = mode


def prepare_student(model: nn.Module, spec: QuantSpec) -> nn.Module:
    """Deep-copy ``model`` with every conv / linear swapped for a fake-quant twin."""
    student = copy.deepcopy(model)
    names = {n for n, m in student.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))}
    missing = set(spec.overrides) - names
    if missing:
        raise ConfigError(f"quant overrides reference unknown layers: {sorted(missing)}")
    for name in sorted(names):
        parent_name, _, attr = name.rpartition(".")
        parent = student.get_submodule(parent_name) if parent_name else student
        layer = getattr(parent, attr)
        wb, ab = spec.bits_for(name)
        qcls = QuantConv2d if isinstance(layer, nn.Conv2d) else QuantLinear
        setattr(parent, attr, qcls.from_float(layer, wb, ab))
    return student


def calibrate(student: nn.Module, data: Dataset, steps: int, batch: int, seed: int = 0,
              augment: bool = True) -> nn.Module:
    """Stream ``steps`` with-replacement batches through the student in calibrate mode."""
    if len(data) == 0:
        raise DataError("calibration data is empty")
    g = torch.Generator().manual_seed(seed)
    images = data.float_images()
    was_training = student.training
    student.eval()
    set_quant_mode(student, "calibrate")
    with torch.no_grad():
        for _ in range(steps):
            idx = torch.randint(0, len(images), (batch,), generator=g)
            student(standard_augment(images[idx], g, enabled=augment))
    for _, layer in quant_layers(student):
        layer.finalize()
    set_quant_mode(student, "quant")
    student.train(was_training)
    return student


def quantize_model(model: nn.Module, spec: QuantSpec, calib_data: Dataset, steps: int = 50,
                   batch: int = 64, seed: int = 0, augment: bool = True) -> nn.Module:
    """Build and calibrate a fake-quantized student; ``model`` is left untouched."""
    student = prepare_student(model, spec)
    return calibrate(student, calib_data, steps, batch, seed, augment)


def freeze_activation_ranges(student: nn.Module) -> nn.Module:
    for name, layer in quant_layers(student):
        if layer.act_params is None:
            raise UsageError(f"layer {name} is not calibrated")
        layer.estimator.freeze()
    return student


def ranges_frozen(student: nn.Module) -> bool:
    return all(layer.estimator.frozen for _, layer in quant_layers(student))


def activation_state(student: nn.Module) -> dict[str, tuple[float, float]]:
    """(scale, zero_point) of every activation quantizer."""
    return {n: (float(l.act_params.scale), float(l.act_params.zero_point))
            for n, l in quant_layers(student) if l.act_params is not None}


# ---------------------------------------------------------------------------
# persistence of the calibrated quantizer state
# ---------------------------------------------------------------------------

def quant_state(student: nn.Module) -> dict:
    """JSON-ready bit widths and activation ranges of every quantized layer."""
    layers = {}
    for name, l in quant_layers(student):
        entry = {"weight_bits": l.weight_bits, "act_bits": l.act_bits,
                 "range": None if l.estimator.chunks == 0 else [l.estimator.amin, l.estimator.amax],
                 "chunks": l.estimator.chunks, "frozen": l.estimator.frozen}
        layers[name] = entry
    return {"layers": layers}


def restore_student(model: nn.Module, state: dict) -> nn.Module:
    """Rebuild a calibrated student from float weights and :func:`quant_state` output."""
    layers = state.get("layers", {})
    spec = QuantSpec(8, 8, {n: (e["weight_bits"], e["act_bits"]) for n, e in layers.items()})
    student = prepare_student(model, spec)
    for name, l in quant_layers(student):
        e = layers.get(name)
        if e is None:
            raise ConfigError(f"quant state has no entry for layer {name}")
        if e["range"] is not None:
            l.estimator.amin, l.estimator.amax = float(e["range"][0]), float(e["range"][1])
            l.estimator.chunks = int(e["chunks"])
            l.finalize()
            l.estimator.frozen = bool(e["frozen"])
    set_quant_mode(student, "quant")
    return student
