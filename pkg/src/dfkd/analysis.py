"""Dataset-correspondence scoring, FGSM probing and prediction-bias reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .datagen import StatsRecorder, bns
from .datasets import Dataset, to_uint8
from .distill import EvalReport, predict
from .errors import DataError
from .model import BnReference

log = logging.getLogger(__name__)


class _MomentAccumulator:
    """Per-channel float64 sums for dataset-global mean / variance."""

    def __init__(self):
        self.n = 0
        self.s1 = None
        self.s2 = None

    def add(self, x: torch.Tensor):
        x = x.detach().double()
        dims = (0, 2, 3) if x.dim() == 4 else (0,)
        s1 = x.sum(dim=dims)
        s2 = (x * x).sum(dim=dims)
        self.n += x.numel() // x.shape[1]
        self.s1 = s1 if self.s1 is None else self.s1 + s1
        self.s2 = s2 if self.s2 is None else self.s2 + s2

    def moments(self, eps=1e-8):
        mu = self.s1 / self.n
        var = (self.s2 / self.n - mu * mu).clamp_min(0.0)
        return mu, torch.sqrt(var + eps)


def adapt_dataset(dataset: Dataset, input_shape=(3, 32, 32), target_norm=None) -> Dataset:
    """Bring a foreign dataset to the model's input contract.

    Grayscale is replicated to the model's channel count, images are
    bilinearly resized, and with ``target_norm`` = (mean, std) each channel is
    standardized by the dataset's own moments and re-expressed in the
    model's pixel statistics.
    """
    x = dataset.float_images().double()
    c, h, w = input_shape
    if x.shape[1] == 1 and c != 1:
        x = x.expand(-1, c, -1, -1)
    if tuple(x.shape[2:]) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if target_norm is not None:
        own_m = x.mean(dim=(0, 2, 3), keepdim=True)
        own_s = x.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-8)
        tm = torch.as_tensor(np.asarray(target_norm[0], dtype=np.float64)).view(1, -1, 1, 1)
        ts = torch.as_tensor(np.asarray(target_norm[1], dtype=np.float64)).view(1, -1, 1, 1)
        x = ((x - own_m) / own_s * ts + tm).clamp(0, 1)
    return Dataset(to_uint8(x), dataset.labels, dataset.num_classes, dataset.split)


def measure_dataset(model: nn.Module, reference: BnReference, dataset: Dataset, batch: int = 500) -> float:
    """J_KL of a whole dataset with per-layer moments pooled over every sample."""
    if len(dataset) == 0:
        raise DataError("cannot measure an empty dataset")
    was = model.training
    model.eval()
    accs = None
    try:
        with torch.no_grad(), StatsRecorder(model, reference.has_input_layer) as rec:
            for start in range(0, len(dataset), batch):
                rec.run(dataset.float_images(np.arange(start, min(start + batch, len(dataset)))))
                if accs is None:
                    accs = [_MomentAccumulator() for _ in rec.inputs]
                for acc, d in zip(accs, rec.inputs):
                    acc.add(d)
    finally:
        model.train(was)
    if len(accs) != len(reference):
        raise DataError(f"measured {len(accs)} layers, reference has {len(reference)}")
    per_layer = []
    for acc, rm, rs in zip(accs, reference.means, reference.stds):
        mu, sd = acc.moments()
        per_layer.append(bns(mu, sd, rm.double(), rs.double()).mean().item())
    return float(np.mean(per_layer))


@dataclass
class SimilarityReport:
    raw: dict[str, float]
    ratio: dict[str, float]
    reference_name: str = "train"
    model_id: str = "model"

    def as_dict(self):
        return dict(model=self.model_id, reference=self.reference_name, raw=self.raw, ratio=self.ratio)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def format_table(self) -> str:
        cols = list(self.raw)
        width = max(10, *(len(c) + 2 for c in cols))
        head = f"{'model':<14}" + "".join(f"{c:>{width}}" for c in cols)
        ratio = f"{self.model_id:<14}" + "".join(f"{self.ratio[c]:>{width}.3f}" for c in cols)
        raw = f"{'  (raw J_KL)':<14}" + "".join(f"{self.raw[c]:>{width}.4f}" for c in cols)
        return "\n".join([head, "-" * len(head), ratio, raw])


def similarity_table(model: nn.Module, reference: BnReference, datasets: dict[str, Dataset],
                     train_key: str = "train", model_id: str = "model", batch: int = 500) -> SimilarityReport:
    """Raw J_KL per dataset and its ratio to the training set's value."""
    if train_key not in datasets:
        raise DataError(f"training set {train_key!r} missing from datasets")
    raw = {name: measure_dataset(model, reference, ds, batch) for name, ds in datasets.items()}
    base = raw[train_key]
    ratio = {name: (1.0 if name == train_key else v / base) for name, v in raw.items()}
    return SimilarityReport(raw, ratio, train_key, model_id)


def fgsm_perturb(model: nn.Module, dataset: Dataset, epsilon: float, batch: int = 250) -> Dataset:
    """x' = clamp(x + eps * sign(grad_x CE(model(x), y)), 0, 1), eval mode."""
    if epsilon < 0:
        raise DataError("epsilon must be >= 0")
    if not dataset.labeled:
        raise DataError("FGSM needs labels")
    if epsilon == 0:
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.num_classes, dataset.split)
    was = model.training
    model.eval()
    outs = []
    try:
        for start in range(0, len(dataset), batch):
            idx = np.arange(start, min(start + batch, len(dataset)))
            x = dataset.float_images(idx).requires_grad_(True)
            loss = T.loss_cross_entropy(model(x), dataset.label_tensor(idx))
            (grad,) = torch.autograd.grad(loss, x)
            outs.append((x.detach() + epsilon * grad.sign()).clamp(0, 1))
    finally:
        model.train(was)
    return Dataset(to_uint8(torch.cat(outs)), dataset.labels.copy(), dataset.num_classes, "fgsm")


@dataclass
class BiasReport:
    soft_mean: list[float]
    hard_mean: list[float]
    order: list[int] = field(default_factory=list)

    def as_dict(self):
        return dict(soft_mean=self.soft_mean, hard_mean=self.hard_mean, order_by_soft=self.order)

    @property
    def max_hard(self) -> float:
        return max(self.hard_mean)


def bias_report(model: nn.Module, dataset: Dataset, batch: int = 500) -> BiasReport:
    """Mean softmax output and mean one-hot argmax over the dataset."""
    if len(dataset) == 0:
        raise DataError("cannot analyze an empty dataset")
    probs = torch.softmax(predict(model, dataset.float_images(), batch).double(), dim=1)
    k = probs.shape[1]
    soft = probs.mean(0).numpy()
    hard = np.bincount(probs.argmax(1).numpy(), minlength=k) / len(dataset)
    order = np.argsort(-soft, kind="stable").tolist()
    return BiasReport(soft.tolist(), hard.tolist(), order)


@dataclass
class TailReport:
    class_order: list[int]
    degradation: list[Optional[float]]
    tail_means: list[float]
    excluded: list[int] = field(default_factory=list)

    def as_dict(self):
        return dict(class_order=self.class_order, per_class_degradation=self.degradation,
                    tail_means=self.tail_means, excluded=self.excluded)


def tail_degradation(fp32_report: EvalReport, ft_report: EvalReport, bias: BiasReport) -> TailReport:
    """Mean relative per-class accuracy loss over the n least-predicted classes, n = 1..K.

    Classes are ordered by ascending hard-prediction frequency in ``bias``;
    classes that improved count as 0 degradation in the per-class list but
    are left out of the means; classes with zero float accuracy are skipped.
    """
    k = len(fp32_report.per_class)
    if len(ft_report.per_class) != k or len(bias.hard_mean) != k:
        raise DataError("reports cover different class sets")
    order = np.argsort(np.asarray(bias.hard_mean), kind="stable").tolist()
    degradation, excluded = [], []
    for c in order:
        s0, s1 = fp32_report.per_class[c], ft_report.per_class[c]
        if s0 <= 0:
            log.warning("tail_degradation: class %d has zero float accuracy; excluded", c)
            excluded.append(c)
            degradation.append(None)
            continue
        degradation.append(max((s0 - s1) / s0, 0.0))
    tail_means, acc = [], []
    for d in degradation:
        if d is not None and d > 0:
            acc.append(d)
        tail_means.append(float(np.mean(acc)) if acc else 0.0)
    return TailReport(order, [None if d is None else float(max(d, 0.0)) for d in degradation],
                      tail_means, excluded)
