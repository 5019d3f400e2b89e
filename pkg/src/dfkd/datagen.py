"""Synthetic sample generation from a trained model.

Four schemes share one optimization loop: Gaussian noise matched to the
input moments, class-logit maximization under a smoothness prior
("inception"), BN-statistics matching ("bns") and their combination. The
scheme is selected by the loss scales (stats, class, prior).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .datasets import Dataset, from_float
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .model import BnReference, bn_layers

log = logging.getLogger(__name__)

STAT_EPS = 1e-8


def bns(mu_meas, sigma_meas, mu_ref, sigma_ref):
    """Per-channel KL(N(mu_ref, sigma_ref^2) || N(mu_meas, sigma_meas^2))."""
    if torch.any(torch.as_tensor(sigma_ref) <= 0):
        raise DataError("reference std must be > 0")
    ratio = (sigma_ref**2 + (mu_ref - mu_meas) ** 2) / sigma_meas**2
    return torch.log(sigma_meas / sigma_ref) - 0.5 * (1.0 - ratio)


def bns_mse(mu_meas, sigma_meas, mu_ref, sigma_ref):
    """Squared error over the two moments (alternative metric, symmetric)."""
    return (mu_meas - mu_ref) ** 2 + (sigma_meas - sigma_ref) ** 2


def channel_moments(x: torch.Tensor, eps: float = STAT_EPS):
    """Channel-wise mean and std over N, H, W (variance + eps)."""
    dims = (0, 2, 3) if x.dim() == 4 else (0,)
    mu = x.mean(dim=dims)
    var = (x - mu.view(1, -1, *([1] * (x.dim() - 2)))).pow(2).mean(dim=dims)
    return mu, torch.sqrt(var + eps)


@dataclass
class BnSnapshot:
    means: list[torch.Tensor]
    stds: list[torch.Tensor]


class StatsRecorder:
    """Forward pre-hooks that capture the input of every BN layer.

    Read-only: running buffers are never touched by the recorder itself.
    With ``input_layer`` the raw model input is recorded as layer 0.
    """

    def __init__(self, model: nn.Module, input_layer: bool = False):
        self.model = model
        self.input_layer = input_layer
        self.inputs: list[torch.Tensor] = []
        self._handles = []

    def __enter__(self):
        self.inputs = []
        self._handles = [bn.register_forward_pre_hook(self._hook) for _, bn in bn_layers(self.model)]
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []

    def _hook(self, module, args):
        self.inputs.append(args[0])

    def run(self, x):
        self.inputs = [x] if self.input_layer else []
        return self.model(x)

    def snapshot(self) -> BnSnapshot:
        moments = [channel_moments(d) for d in self.inputs]
        return BnSnapshot([m for m, _ in moments], [s for _, s in moments])


def j_kl_from_snapshot(snap: BnSnapshot, reference: BnReference, metric: str = "kl") -> torch.Tensor:
    """Mean over layers of the channel-averaged divergence."""
    if len(snap.means) != len(reference):
        raise ShapeError(f"measured {len(snap.means)} layers, reference has {len(reference)}")
    fn = bns if metric == "kl" else bns_mse
    per_layer = [fn(m, s, rm.to(m.dtype), rs.to(m.dtype)).mean()
                 for m, s, rm, rs in zip(snap.means, snap.stds, reference.means, reference.stds)]
    return torch.stack(per_layer).mean()


def j_kl(x: torch.Tensor, model: nn.Module, reference: BnReference, metric: str = "kl") -> torch.Tensor:
    """Statistics divergence of batch ``x``; differentiable w.r.t. ``x``.

    The model is run in eval mode, so running statistics are not updated.
    """
    was_training = model.training
    model.eval()
    try:
        with StatsRecorder(model, reference.has_input_layer) as rec:
            rec.run(x)
            return j_kl_from_snapshot(rec.snapshot(), reference, metric)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# augmentation and prior
# ---------------------------------------------------------------------------

AUG_OPS = ("flip", "crop", "cutout")


def _crop_resize(x, gen, scale_range=(0.7, 1.0)):
    n = x.shape[0]
    s = scale_range[0] + (scale_range[1] - scale_range[0]) * torch.rand(n, generator=gen, dtype=x.dtype)
    tx = (1 - s) * (2 * torch.rand(n, generator=gen, dtype=x.dtype) - 1)
    ty = (1 - s) * (2 * torch.rand(n, generator=gen, dtype=x.dtype) - 1)
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = s
    theta[:, 1, 1] = s
    theta[:, 0, 2] = tx
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _cutout_mask(n, h, w, gen, dtype):
    mask = torch.ones(n, 1, h, w, dtype=dtype)
    counts = torch.randint(1, 3, (n,), generator=gen)
    for i in range(n):
        for _ in range(int(counts[i])):
            area = 0.05 + 0.20 * torch.rand(1, generator=gen).item()
            aspect = math.exp((torch.rand(1, generator=gen).item() - 0.5) * math.log(2.0))
            ch = max(1, min(h, round(math.sqrt(area * h * w * aspect))))
            cw = max(1, min(w, round(math.sqrt(area * h * w / aspect))))
            y0 = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
            x0 = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
            mask[i, :, y0:y0 + ch, x0:x0 + cw] = 0
    return mask


def in_batch_augment(x: torch.Tensor, duplicates: int, generator: Optional[torch.Generator] = None,
                     ops: Sequence[str] = AUG_OPS, enabled: bool = True) -> torch.Tensor:
    """Duplicate every sample ``duplicates`` times with independent random transforms.

    Each duplicate is flipped with probability 0.5 (if "flip" is enabled) and
    then gets one of the enabled spatial ops (crop-resize or 1-2 cutout
    rectangles). The output is ordered duplicate-major: row ``d * B + i`` is
    duplicate ``d`` of sample ``i``. All ops are differentiable, so the
    duplicates' gradients sum back onto the original.
    """
    if duplicates < 1:
        raise ConfigError("duplicates must be >= 1")
    unknown = set(ops) - set(AUG_OPS)
    if unknown:
        raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")
    out = x.repeat(duplicates, 1, 1, 1)
    if not enabled or not ops:
        return out
    n, _, h, w = out.shape
    if "flip" in ops:
        flip = (torch.rand(n, generator=generator) < 0.5).view(-1, 1, 1, 1)
        out = torch.where(flip, out.flip(3), out)
    spatial = [op for op in ops if op != "flip"]
    if spatial:
        choice = torch.randint(0, len(spatial), (n,), generator=generator)
        if "crop" in spatial:
            sel = choice == spatial.index("crop")
            cropped = _crop_resize(out, generator)
            out = torch.where(sel.view(-1, 1, 1, 1), cropped, out)
        if "cutout" in spatial:
            sel = (choice == spatial.index("cutout")).view(-1, 1, 1, 1)
            mask = _cutout_mask(n, h, w, generator, out.dtype)
            out = out * torch.where(sel, mask, torch.ones_like(mask))
    return out


def prior_loss(x: torch.Tensor, kernel_size: int = 5, sigma: float = 1.0) -> torch.Tensor:
    """MSE between ``x`` and its Gaussian-smoothed copy; the smoothed side is detached."""
    return T.loss_mse(x, T.gaussian_smooth(x, kernel_size, sigma).detach())


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    """Hyperparameters of the generation loop.

    ``stats_scale``, ``class_scale``, ``prior_scale`` select the scheme:
    (1, 0, 0) is BNS, (0, b, g) inception, all non-zero BNS+inception.
    ``class_temp`` is the temperature in exp(-logit / class_temp).
    """

    stats_scale: float = 1.0
    class_scale: float = 0.0
    prior_scale: float = 0.0
    budget: int = 1000
    batch_size: int = 64
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    class_temp: float = 1.0
    prior_kernel: int = 5
    prior_sigma: float = 1.0
    duplicates: int = 4
    augment: bool = True
    lr: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    lr_drops: tuple[int, ...] = (800,)
    lr_drop_factor: float = 0.1
    metric: str = "kl"
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.betas = tuple(self.betas)
        self.lr_drops = tuple(self.lr_drops)
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.duplicates < 1:
            raise ConfigError("duplicates must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.stats_scale, self.class_scale, self.prior_scale) < 0:
            raise ConfigError("loss scales must be >= 0")
        if self.stats_scale == 0 and self.class_scale == 0:
            raise ConfigError("stats_scale and class_scale cannot both be zero")
        if self.class_temp <= 0:
            raise ConfigError("class_temp must be > 0")
        if self.metric not in ("kl", "mse"):
            raise ConfigError(f"unknown metric {self.metric!r}")

    @property
    def scheme(self) -> str:
        if self.class_scale == 0:
            return "bns"
        return "inception" if self.stats_scale == 0 else "bns+inception"

    def schedule(self) -> T.LrSchedule:
        return T.LrSchedule(self.lr, self.budget, 0, cosine=False,
                            drop_steps=tuple((s, self.lr_drop_factor) for s in self.lr_drops))


SCHEME_SCALES = {
    "bns": (1.0, 0.0, 0.0),
    "bns+inception": (1.0, 1e-3, 1.0),
    "inception": (0.0, 1e-3, 1.0),
}


@dataclass
class SyntheticBatch:
    samples: torch.Tensor
    targets: torch.Tensor
    j_kl: float
    scheme: str = "bns"

    def __len__(self):
        return self.samples.shape[0]

    def to_dataset(self, keep_labels: bool = False, num_classes: int = 10) -> Dataset:
        labels = self.targets.numpy() if keep_labels else None
        return from_float(self.samples, labels, num_classes, split="synthetic")


@dataclass
class StepRecord:
    step: int
    j_kl: float
    prior: float
    inception: float
    total: float

    def as_dict(self):
        return dict(step=self.step, j_kl=self.j_kl, prior_loss=self.prior,
                    inception_loss=self.inception, loss=self.total)


def _teacher_labels(model, x, batch=256):
    was = model.training
    model.eval()
    with torch.no_grad():
        out = torch.cat([model(x[i:i + batch]).argmax(1) for i in range(0, len(x), batch)])
    model.train(was)
    return out


def generate_gaussian(n: int, input_mean, input_std, input_shape=(3, 32, 32), seed: int = 0,
                      model: Optional[nn.Module] = None) -> SyntheticBatch:
    """I.i.d. normal pixels with the given per-channel moments, clamped to [0, 1].

    Targets are the model's argmax when a model is given, else zeros.
    """
    c = input_shape[0]
    mean = torch.as_tensor(np.broadcast_to(np.asarray(input_mean, dtype=np.float64), (c,)).copy())
    std = torch.as_tensor(np.broadcast_to(np.asarray(input_std, dtype=np.float64), (c,)).copy())
    if torch.any(std < 0):
        raise ConfigError("input_std must be >= 0")
    g = torch.Generator().manual_seed(seed)
    z = torch.randn((n, *input_shape), generator=g, dtype=torch.float64)
    x = (z * std.view(1, -1, 1, 1) + mean.view(1, -1, 1, 1)).clamp(0, 1).float()
    targets = _teacher_labels(model, x) if model is not None else torch.zeros(n, dtype=torch.long)
    return SyntheticBatch(x, targets, float("nan"), "gaussian")


def _check(step, name, value):
    if not torch.isfinite(value):
        raise DivergenceError(step, name, value.item())


def _run(model, reference, config: GenConfig, snapshot_steps=(), monitor=False, on_step=None):
    g = torch.Generator().manual_seed(config.seed)
    x = torch.randn((config.batch_size, *config.input_shape), generator=g)
    targets = torch.randint(0, config.num_classes, (config.batch_size,), generator=g)
    x.requires_grad_(True)
    opt = T.make_optimizer("adam", [x], config.lr, betas=config.betas)
    sched = config.schedule()
    dup_targets = targets.repeat(config.duplicates)
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    need_stats = config.stats_scale > 0 or monitor
    need_prior = config.prior_scale > 0 or monitor
    need_cls = config.class_scale > 0 or monitor
    history, snapshots = [], {}
    snapshot_steps = set(snapshot_steps)
    try:
        with StatsRecorder(model, reference.has_input_layer) as rec:
            for step in range(config.budget + 1):
                with torch.no_grad():
                    x.clamp_(0.0, 1.0)
                if step in snapshot_steps:
                    snapshots[step] = x.detach().clone()
                if step == config.budget:
                    break
                T.set_lr(opt, sched.lr_at(step))
                xa = in_batch_augment(x, config.duplicates, g, enabled=config.augment)
                zero = xa.new_zeros(())
                loss_p = prior_loss(xa, config.prior_kernel, config.prior_sigma) if need_prior else zero
                logits = rec.run(xa)
                loss_i = T.loss_inception(logits, dup_targets, config.class_temp) if need_cls else zero
                loss_s = (j_kl_from_snapshot(rec.snapshot(), reference, config.metric)
                          if need_stats else zero)
                loss = zero
                for scale, term, name in ((config.stats_scale, loss_s, "stats"),
                                          (config.class_scale, loss_i, "inception"),
                                          (config.prior_scale, loss_p, "prior")):
                    _check(step, name, term)
                    if scale:
                        loss = loss + scale * term
                _check(step, "total", loss)
                rec_ = StepRecord(step, loss_s.item(), loss_p.item(), loss_i.item(), loss.item())
                history.append(rec_)
                if on_step is not None:
                    on_step(rec_)
                opt.zero_grad(set_to_none=True)
                T.backward(loss)
                opt.step()
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.train(was_training)
    return x.detach(), targets, history, snapshots


def _finish(model, reference, config, x, targets):
    with torch.no_grad():
        final = j_kl(x, model, reference, config.metric).item()
    if config.scheme == "bns":
        targets = _teacher_labels(model, x)
    return SyntheticBatch(x, targets, final, config.scheme)


def generate(model: nn.Module, reference: BnReference, config: GenConfig, on_step=None) -> SyntheticBatch:
    """Optimize one batch of inputs; returns samples in [0, 1] with their final J_KL."""
    x, targets, _, _ = _run(model, reference, config, on_step=on_step)
    return _finish(model, reference, config, x, targets)


def generate_many(model: nn.Module, reference: BnReference, config: GenConfig, n: int,
                  on_step=None) -> SyntheticBatch:
    """Generate ``n`` samples as independent batches of ``config.batch_size``.

    Batch ``k`` uses seed ``config.seed + k``; the last batch may be smaller.
    """
    from dataclasses import replace

    parts = []
    for k, start in enumerate(range(0, n, config.batch_size)):
        cfg = replace(config, seed=config.seed + k, batch_size=min(config.batch_size, n - start))
        parts.append(generate(model, reference, cfg, on_step=on_step))
    samples = torch.cat([p.samples for p in parts])
    targets = torch.cat([p.targets for p in parts])
    with torch.no_grad():
        jk = float(np.mean([p.j_kl for p in parts]))
    return SyntheticBatch(samples, targets, jk, config.scheme)


@dataclass
class MonitorResult:
    history: list[StepRecord]
    snapshots: dict[int, SyntheticBatch] = field(default_factory=dict)
    final: Optional[SyntheticBatch] = None

    def series(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.history])


def monitor_generation(model: nn.Module, reference: BnReference, config: GenConfig,
                       snapshot_steps: Sequence[int] = (), on_step=None) -> MonitorResult:
    """Run generation recording J_KL, prior and inception losses at every step.

    Terms with zero scale are measured but not optimized. Snapshots are the
    clamped batch at the start of each listed step (``budget`` = final batch).
    """
    bad = [s for s in snapshot_steps if not 0 <= s <= config.budget]
    if bad:
        raise ConfigError(f"snapshot steps outside [0, {config.budget}]: {bad}")
    x, targets, history, snaps = _run(model, reference, config, snapshot_steps, monitor=True, on_step=on_step)
    snapshots = {s: _finish(model, reference, config, v, targets) for s, v in sorted(snaps.items())}
    return MonitorResult(history, snapshots, _finish(model, reference, config, x, targets))
