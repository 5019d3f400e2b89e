"""Quantized knowledge distillation, cross-entropy fine-tuning and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import tensor as T
from .datasets import Dataset, standard_augment
from .errors import ConfigError, DataError, DivergenceError, ShapeError, UsageError
from .model import freeze_bn
from .quant import quant_layers, ranges_frozen

log = logging.getLogger(__name__)

OBJECTIVES = ("KD", "KD+IQ", "KD+Mix", "KD+IQ+Mix", "CE")


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 0.01
    mix_rate: float = 0.5
    taps: tuple[str, ...] = ("stage1", "stage2", "stage3")
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 20
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    freeze_bn: bool = False
    objective: str = "KD+IQ+Mix"
    augment: bool = True
    eval_every: int = 0  # 0 -> steps // 20

    def __post_init__(self):
        self.taps = tuple(self.taps)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if not 0 <= self.mix_rate <= 1:
            raise ConfigError("mix_rate must be in [0, 1]")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @property
    def uses_iq(self) -> bool:
        return "IQ" in self.objective and self.beta > 0

    @property
    def uses_mix(self) -> bool:
        return "Mix" in self.objective and self.mix_rate > 0

    def schedule(self) -> T.LrSchedule:
        return T.LrSchedule(self.lr, max(self.steps, 1), min(self.warmup_steps, self.steps))


@dataclass
class EvalReport:
    top1: float
    per_class: list[float]
    counts: list[int]
    top1_std: Optional[float] = None
    runs: list[float] = field(default_factory=list)

    def as_dict(self):
        return dict(top1=self.top1, per_class=self.per_class, counts=self.counts,
                    top1_std=self.top1_std, runs=self.runs)

    @classmethod
    def aggregate(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        """Mean report over repeated runs, with the std of top-1 (population)."""
        tops = [r.top1 for r in reports]
        per = np.mean([r.per_class for r in reports], axis=0).tolist()
        return cls(float(np.mean(tops)), per, list(reports[0].counts), float(np.std(tops)), tops)


def predict(model: nn.Module, images: torch.Tensor, batch: int = 500) -> torch.Tensor:
    """Eval-mode logits for a float image tensor."""
    was = model.training
    model.eval()
    with torch.no_grad():
        out = torch.cat([model(images[i:i + batch]) for i in range(0, len(images), batch)])
    model.train(was)
    return out


def evaluate(model: nn.Module, dataset: Dataset, batch: int = 500) -> EvalReport:
    """Top-1 and per-class accuracy (eval mode, deterministic)."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    labels = dataset.labels
    if labels is None:
        raise DataError("evaluation needs a labeled dataset")
    preds = predict(model, dataset.float_images(), batch).argmax(1).numpy()
    correct = preds == labels
    per_class, counts = [], []
    for c in range(dataset.num_classes):
        sel = labels == c
        counts.append(int(sel.sum()))
        per_class.append(float(correct[sel].mean()) if sel.any() else 0.0)
    return EvalReport(float(correct.mean()), per_class, counts)


def input_mix(x: torch.Tensor, mix_rate: float, generator: Optional[torch.Generator] = None,
              lam: Optional[float] = None):
    """Blend every sample with its partner in the reversed batch.

    ``lam ~ U[0, mix_rate]`` once per batch; returns (mixed, lam).
    """
    if x.shape[0] < 2:
        log.warning("input_mix: batch of %d left unmixed", x.shape[0])
        return x, 0.0
    if lam is None:
        lam = mix_rate * torch.rand((), generator=generator).item()
    return (1.0 - lam) * x + lam * x.flip(0), lam


def iq_loss(teacher_feats: Sequence[torch.Tensor], student_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over taps of smooth-L1(student, teacher); teacher side detached."""
    if len(teacher_feats) != len(student_feats) or not teacher_feats:
        raise ShapeError(f"tap lists differ: {len(teacher_feats)} vs {len(student_feats)}")
    return torch.stack([T.loss_smooth_l1(s, t.detach()) for t, s in zip(teacher_feats, student_feats)]).mean()


def _check_finite(step, name, value):
    if not torch.isfinite(value):
        raise DivergenceError(step, name, value.item())


def _loop(student, data: Dataset, config: DistillConfig, step_loss: Callable, val: Optional[Dataset],
          on_metrics: Optional[Callable]):
    g = torch.Generator().manual_seed(config.seed)
    images = data.float_images()
    params = [p for p in student.parameters() if p.requires_grad]
    opt = T.make_optimizer("sgd", params, config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)
    sched = config.schedule()
    eval_every = config.eval_every or max(config.steps // 20, 1)
    freeze_bn(student, config.freeze_bn)
    student.train()
    try:
        for step in range(config.steps):
            lr = sched.lr_at(step)
            T.set_lr(opt, lr)
            idx = torch.randint(0, len(images), (config.batch_size,), generator=g)
            x = standard_augment(images[idx], g, enabled=config.augment)
            losses = step_loss(x, idx, g, step)
            opt.zero_grad(set_to_none=True)
            T.backward(losses["loss_total"])
            opt.step()
            record = {"step": step + 1, "lr": lr, **{k: float(v.detach()) for k, v in losses.items()}}
            if val is not None and ((step + 1) % eval_every == 0 or step + 1 == config.steps):
                record["eval_top1"] = evaluate(student, val).top1
                student.train()
            if on_metrics is not None:
                on_metrics(record)
    finally:
        freeze_bn(student, False)
        student.eval()
    return student


def distill(teacher: nn.Module, student: nn.Module, data: Dataset, config: DistillConfig,
            val: Optional[Dataset] = None, on_metrics: Optional[Callable] = None):
    """Fine-tune ``student`` to match ``teacher`` on ``data`` (labels unused).

    Per step: draw a batch with replacement, augment, mix inputs, forward
    both models with taps, loss = alpha * KD + beta * IQ, SGD step on the
    student's float masters. Returns (student, EvalReport or None).
    """
    if config.objective == "CE":
        raise ConfigError("use finetune_ce for the CE objective")
    if quant_layers(student) and not ranges_frozen(student):
        raise UsageError("student activation ranges must be frozen before distillation")
    if len(data) == 0:
        raise DataError("distillation data is empty")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    taps = config.taps if config.uses_iq else ()

    def step_loss(x, idx, g, step):
        if config.uses_mix:
            x, _ = input_mix(x, config.mix_rate, g)
        with torch.no_grad():
            t_logits, t_feats = teacher.forward_with_taps(x, taps)
        s_logits, s_feats = student.forward_with_taps(x, taps)
        loss_kd = T.loss_kd_kl(t_logits, s_logits)
        _check_finite(step, "kd", loss_kd)
        out = {"loss_kd": loss_kd.detach()}
        total = config.alpha * loss_kd
        if taps:
            loss_iq = iq_loss(t_feats, s_feats)
            _check_finite(step, "iq", loss_iq)
            total = total + config.beta * loss_iq
            out["loss_iq"] = loss_iq.detach()
        else:
            out["loss_iq"] = torch.zeros(())
        _check_finite(step, "total", total)
        out["loss_total"] = total
        return out

    try:
        _loop(student, data, config, step_loss, val, on_metrics)
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    return student, (evaluate(student, val) if val is not None else None)


def finetune_ce(student: nn.Module, data: Dataset, config: DistillConfig, val: Optional[Dataset] = None,
                on_metrics: Optional[Callable] = None):
    """Same loop as :func:`distill` with cross-entropy on ground-truth labels (no mixing)."""
    if not data.labeled or data.split == "synthetic":
        raise DataError("cross-entropy fine-tuning needs real labeled data")
    if quant_layers(student) and not ranges_frozen(student):
        raise UsageError("student activation ranges must be frozen before fine-tuning")
    labels = data.label_tensor()

    def step_loss(x, idx, g, step):
        loss = T.loss_cross_entropy(student(x), labels[idx])
        _check_finite(step, "ce", loss)
        return {"loss_total": loss}

    _loop(student, data, config, step_loss, val, on_metrics)
    return student, (evaluate(student, val) if val is not None else None)


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_steps: int = 50
    seed: int = 0


def train_classifier(model: nn.Module, data: Dataset, config: TrainConfig, val: Optional[Dataset] = None,
                     on_metrics: Optional[Callable] = None):
    """Train a float model from scratch with CE (warm-up + cosine SGD)."""
    dcfg = DistillConfig(lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
                         warmup_steps=config.warmup_steps, steps=config.steps,
                         batch_size=config.batch_size, seed=config.seed, objective="CE")
    return finetune_ce(model, data, dcfg, val, on_metrics)
