"""Desk-scale ResNet, BN reference extraction and the weight file format."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, UnsupportedModelError

DEFAULT_STAGES = ((1, 16), (1, 32), (1, 64))
WEIGHT_MAGIC = b"DFKD"
WEIGHT_VERSION = 1
VAR_FLOOR = 1e-12


class BatchNorm(nn.BatchNorm2d):
    """BatchNorm2d with a ``frozen`` switch.

    When frozen, train-mode forwards still normalize with batch statistics
    but leave the running buffers untouched.
    """

    frozen = False

    def forward(self, x):
        if self.training and self.frozen:
            return T.batch_norm(x, self.weight, self.bias, None, None, True, self.momentum, self.eps)
        if self.training:
            return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                                True, self.momentum, self.eps)
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            False, self.momentum, self.eps)


class Normalize(nn.Module):
    """Fixed per-channel input normalization (dataset mean/std)."""

    def __init__(self, channels, mean=None, std=None):
        super().__init__()
        mean = torch.full((channels,), 0.5) if mean is None else torch.as_tensor(mean, dtype=torch.float32)
        std = torch.full((channels,), 0.25) if std is None else torch.as_tensor(std, dtype=torch.float32)
        self.register_buffer("mean", mean.clone().float())
        self.register_buffer("std", std.clone().float())

    def forward(self, x):
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm(cout)
        # projection shortcut on any shape change
        self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False) if stride != 1 or cin != cout else None

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(out + skip)


class ResNetDesk(nn.Module):
    """Stem conv/BN/ReLU, basic-block stages, global pool and FC head.

    Inputs are images in [0, 1]; the ``normalize`` layer applies the dataset
    normalization inside the model so that generated samples live in pixel
    space.
    """

    def __init__(self, stages=DEFAULT_STAGES, num_classes=10, input_shape=(3, 32, 32),
                 norm_mean=None, norm_std=None):
        super().__init__()
        stages = [tuple(s) for s in stages]
        c, h, w = input_shape
        if not stages or any(b < 1 or ch < 1 for b, ch in stages):
            raise ConfigError(f"invalid stages {stages}")
        div = 2 ** (len(stages) - 1)
        if h % div or w % div:
            raise ConfigError(f"input size {h}x{w} not divisible by {div}")
        self.stages_cfg = stages
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)

        self.normalize = Normalize(c, norm_mean, norm_std)
        width = stages[0][1]
        self.stem = nn.Module()
        self.stem.conv = nn.Conv2d(c, width, 3, 1, 1, bias=False)
        self.stem.bn = BatchNorm(width)
        cin = width
        for i, (blocks, ch) in enumerate(stages):
            layers = []
            for j in range(blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(cin, ch, stride))
                cin = ch
            self.add_module(f"stage{i + 1}", nn.Sequential(*layers))
        self.fc = nn.Linear(cin, num_classes)
        self.default_taps = tuple(f"stage{i + 1}" for i in range(len(stages)))
        self._init_weights()
        self.to(memory_format=torch.channels_last)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight)
                nn.init.zeros_(m.bias)

    def stage_modules(self):
        return [getattr(self, name) for name in self.default_taps]

    def forward_with_taps(self, x, taps: Optional[Sequence[str]] = None):
        if x.dim() != 4 or tuple(x.shape[1:2]) != self.input_shape[:1]:
            raise ShapeError(f"input shape {tuple(x.shape)} does not match model input {self.input_shape}")
        taps = tuple(taps or ())
        unknown = set(taps) - set(self.default_taps) - {"stem"}
        if unknown:
            raise ConfigError(f"unknown tap points {sorted(unknown)}")
        feats = {}
        x = self.normalize(x.contiguous(memory_format=torch.channels_last))
        x = T.relu(self.stem.bn(self.stem.conv(x)))
        feats["stem"] = x
        for name in self.default_taps:
            x = getattr(self, name)(x)
            feats[name] = x
        logits = self.fc(T.flatten(T.global_avg_pool(x)))
        return logits, [feats[t] for t in taps]

    def forward(self, x):
        return self.forward_with_taps(x)[0]


def build_resnet_desk(stages=DEFAULT_STAGES, num_classes=10, input_shape=(3, 32, 32),
                      seed: Optional[int] = None, norm_mean=None, norm_std=None) -> ResNetDesk:
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return ResNetDesk(stages, num_classes, input_shape, norm_mean, norm_std)
    return ResNetDesk(stages, num_classes, input_shape, norm_mean, norm_std)


def forward(model: ResNetDesk, x, mode: str = "eval", taps=None):
    """Run ``model`` in ``mode`` ("train" or "eval"); returns (logits, tapped features)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model.forward_with_taps(x, taps)


def bn_layers(model: nn.Module) -> list[tuple[str, nn.BatchNorm2d]]:
    """BN layers in forward order."""
    return [(n, m) for n, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)]


def freeze_bn(model: nn.Module, frozen: bool = True) -> nn.Module:
    for _, m in bn_layers(model):
        m.frozen = frozen
    return model


@dataclass
class BnReference:
    """Target statistics: per-layer (mean, std), optional input layer first."""

    names: list[str]
    means: list[torch.Tensor]
    stds: list[torch.Tensor]
    has_input_layer: bool = False

    def __len__(self):
        return len(self.means)


def extract_bn_reference(model: nn.Module, dataset_norm=None) -> BnReference:
    """Copy (running_mean, sqrt(running_var)) of every BN layer.

    ``dataset_norm`` = (mean, std) prepends the input normalization as
    layer 0. Pass ``True`` to use the model's own ``normalize`` buffers.
    """
    layers = bn_layers(model)
    if not layers:
        raise UnsupportedModelError("model has no batch-norm layers")
    names, means, stds = [], [], []
    if dataset_norm is True:
        dataset_norm = (model.normalize.mean, model.normalize.std)
    if dataset_norm is not None:
        m, s = dataset_norm
        names.append("input")
        means.append(torch.as_tensor(m, dtype=torch.float32).detach().clone())
        stds.append(torch.as_tensor(s, dtype=torch.float32).detach().clone())
    for name, bn in layers:
        names.append(name)
        means.append(bn.running_mean.detach().clone())
        stds.append(bn.running_var.detach().clamp_min(VAR_FLOOR).sqrt())
    return BnReference(names, means, stds, dataset_norm is not None)


# ---------------------------------------------------------------------------
# weight file
# ---------------------------------------------------------------------------

def _exported_tensors(model: nn.Module):
    for name, t in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, t.detach().cpu().contiguous()


def save_weights(model: nn.Module, path) -> None:
    tensors = list(_exported_tensors(model))
    chunks = [WEIGHT_MAGIC, struct.pack("<HI", WEIGHT_VERSION, len(tensors))]
    for name, t in tensors:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.numpy().astype("<f4", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_weight_file(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    name = "<header>"
    try:
        version, count = struct.unpack_from("<HI", data, pos)
        pos += 6
        if version != WEIGHT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise FormatError(f"{path}: truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt entry after {name!r}: {exc}") from None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def _infer_architecture(tensors):
    try:
        stem = tensors["stem.conv.weight"]
        fc = tensors["fc.weight"]
    except KeyError as exc:
        raise FormatError(f"cannot infer architecture: missing {exc.args[0]}") from None
    blocks = {}
    for name, t in tensors.items():
        m = re.fullmatch(r"stage(\d+)\.(\d+)\.conv1\.weight", name)
        if m:
            blocks.setdefault(int(m.group(1)), {})[int(m.group(2))] = t.shape[0]
    stages = [(len(blocks[i]), blocks[i][0]) for i in sorted(blocks)]
    return dict(stages=stages, num_classes=fc.shape[0], input_shape=(stem.shape[1], 32, 32))


def load_weights(path, model: Optional[nn.Module] = None) -> nn.Module:
    """Load a weight file into ``model`` (or a freshly built matching ResNetDesk).

    Nothing is modified unless every tensor matches by name and shape.
    """
    tensors = read_weight_file(path)
    if model is None:
        model = build_resnet_desk(**_infer_architecture(tensors))
    expected = dict(_exported_tensors(model))
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise FormatError(f"{path}: tensor set mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise ShapeError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, model expects {tuple(ref.shape)}")
    state = model.state_dict()
    with torch.no_grad():
        for name, arr in tensors.items():
            state[name].copy_(torch.from_numpy(arr))
    return model
