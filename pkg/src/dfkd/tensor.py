"""Differentiable primitives, losses, optimizers and LR schedules.

Tensors are plain ``torch.Tensor`` objects; torch's autograd provides the
reverse-mode engine. The functions here add the argument validation and the
exact semantics the rest of the toolkit relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatchError, ShapeError, UsageError

DEFAULT_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


def set_verification_mode(enabled: bool = True) -> None:
    """Switch the default element type between float32 and float64."""
    torch.set_default_dtype(VERIFY_DTYPE if enabled else DEFAULT_DTYPE)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def conv2d(input, weight, bias=None, stride=1, padding=0, groups=1):
    if input.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {tuple(input.shape)}, {tuple(weight.shape)}")
    if input.shape[1] != weight.shape[1] * groups:
        raise ShapeError(f"conv2d channel mismatch: input has {input.shape[1]}, weight expects {weight.shape[1] * groups}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    if min(_pair(stride)) < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding, groups=groups)


def linear(input, weight, bias=None):
    if input.dim() != 2 or weight.dim() != 2 or input.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: {tuple(input.shape)} x {tuple(weight.shape)}^T")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(input, weight, bias)


def batch_norm(input, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over N, H, W.

    In training mode the batch statistics normalize the input and, when
    ``running_mean``/``running_var`` are given, the running buffers are
    updated in place as ``r <- (1 - momentum) * r + momentum * batch_stat``.
    Passing ``None`` buffers in training mode normalizes by batch statistics
    without touching any state (used by frozen BN).
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be > 0, got {eps}")
    if input.dim() not in (2, 4):
        raise ShapeError(f"batch_norm expects NC or NCHW input, got {tuple(input.shape)}")
    if training and input.numel() // input.shape[1] < 2:
        raise DegenerateBatchError("batch_norm in train mode needs at least 2 values per channel")
    return F.batch_norm(input, running_mean, running_var, gamma, beta, training, momentum, eps)


def gaussian_kernel(kernel_size: int, sigma: float, dtype=None) -> torch.Tensor:
    """Normalized 2-D Gaussian stencil of shape (k, k)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    r = torch.arange(kernel_size, dtype=torch.float64) - kernel_size // 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype or torch.get_default_dtype())


def gaussian_smooth(input, kernel_size: int = 5, sigma: float = 1.0):
    """Depthwise Gaussian blur with reflection padding."""
    n, c, h, w = input.shape
    k = gaussian_kernel(kernel_size, sigma, dtype=input.dtype)
    weight = k.expand(c, 1, kernel_size, kernel_size)
    p = kernel_size // 2
    padded = F.pad(input, (p, p, p, p), mode="reflect") if p else input
    return F.conv2d(padded, weight, groups=c)


def relu(input):
    # torch's threshold backward gives 0 at exactly 0
    return F.relu(input)


def avg_pool2d(input, kernel_size, stride=None):
    return F.avg_pool2d(input, kernel_size, stride)


def global_avg_pool(input):
    return input.mean(dim=(2, 3))


def flatten(input):
    return input.reshape(input.shape[0], -1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _congruent(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_smooth_l1(a, b):
    _congruent(a, b, "smooth_l1")
    return F.smooth_l1_loss(a, b, beta=1.0)


def loss_mse(a, b):
    _congruent(a, b, "mse")
    return F.mse_loss(a, b)


def loss_cross_entropy(logits, labels):
    if logits.dim() != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    return F.cross_entropy(logits, labels)


def loss_kd_kl(teacher_logits, student_logits):
    """Batch mean of KL(softmax(teacher) || softmax(student)), temperature 1.

    The teacher side is detached; only the student receives gradients.
    """
    _congruent(teacher_logits, student_logits, "kd_kl")
    t_log = F.log_softmax(teacher_logits.detach(), dim=1)
    s_log = F.log_softmax(student_logits, dim=1)
    return (t_log.exp() * (t_log - s_log)).sum(dim=1).mean()


def loss_inception(logits, targets, scale: float = 1.0):
    """Batch mean of exp(-logit[target] / scale)."""
    if scale <= 0:
        raise ConfigError(f"inception scale must be > 0, got {scale}")
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("inception: target out of range")
    picked = logits.gather(1, targets.view(-1, 1)).squeeze(1)
    return torch.exp(-picked / scale).mean()


# ---------------------------------------------------------------------------
# autodiff entry point
# ---------------------------------------------------------------------------

def backward(root: torch.Tensor) -> None:
    """Reverse-mode accumulation from a scalar root.

    Gradients accumulate into ``.grad``; calling twice without zeroing sums
    the two passes.
    """
    if root.numel() != 1:
        raise UsageError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    root.backward()


# ---------------------------------------------------------------------------
# optimizers and schedules
# ---------------------------------------------------------------------------

def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9,
                   betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """SGD with heavy-ball momentum (v <- mu v + g; p <- p - lr v) or Adam."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer kind {kind!r}")


def set_lr(optimizer, lr: float) -> None:
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class LrSchedule:
    """Linear warm-up then cosine decay, or a constant rate with step drops.

    With ``cosine=False`` the rate stays at ``peak_lr`` after warm-up and is
    multiplied by each ``(step, factor)`` in ``drop_steps`` from that step on.
    Drops also apply on top of the cosine shape when both are requested.
    """

    peak_lr: float
    total_steps: int
    warmup_steps: int = 0
    cosine: bool = True
    drop_steps: Sequence[tuple[int, float]] = field(default_factory=tuple)

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0")

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ConfigError(f"step {step} outside [0, {self.total_steps}]")
        if step < self.warmup_steps:
            lr = self.peak_lr * step / self.warmup_steps
        elif self.cosine:
            span = self.total_steps - self.warmup_steps
            progress = 1.0 if span == 0 else (step - self.warmup_steps) / span
            lr = self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
        else:
            lr = self.peak_lr
        for at, factor in self.drop_steps:
            if step >= at:
                lr *= factor
        return max(lr, 0.0)


def lr_at(schedule: LrSchedule, step: int) -> float:
    return schedule.lr_at(step)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    worst_rel_err: float
    worst_input: int
    worst_index: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               tolerance: float = 1e-4, h: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd partials of scalar ``fn(*inputs)`` with central differences.

    Every element of every input is perturbed by +-h. The relative error of a
    partial is ``|a - n| / max(|a|, |n|, floor)``; the worst one is reported.
    Inputs must be float64.
    """
    inputs = [x.detach().clone() for x in inputs]
    for x in inputs:
        if x.dtype != torch.float64:
            raise UsageError("grad_check requires float64 inputs")
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise UsageError("grad_check fn must return a scalar")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = (0.0, -1, -1)
    with torch.no_grad():
        for i, x in enumerate(inputs):
            a = analytic[i] if analytic[i] is not None else torch.zeros_like(x)
            flat = x.view(-1)
            a_flat = a.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                fp = fn(*inputs).item()
                flat[j] = orig - h
                fm = fn(*inputs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                an = a_flat[j].item()
                err = abs(an - num) / max(abs(an), abs(num), floor)
                if err > worst[0]:
                    worst = (err, i, j)
    return GradCheckReport(worst[0], worst[1], worst[2], tolerance)
