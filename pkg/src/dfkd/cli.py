"""Command-line drivers: one subcommand per pipeline stage.

Every run writes ``config.toml`` (fully resolved), ``metrics.jsonl`` and
``report.json`` into its output directory.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np
import tomli
import tomli_w
import torch

from . import analysis, datagen, datasets, distill, model as M, quant
from .errors import ConfigError, DFKDError

log = logging.getLogger("dfkd")

# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

SECTIONS: dict[str, dict[str, Any]] = {
    "data": {"classes": 10, "per_class": 500, "val_per_class": 100, "split_seed": 0},
    "model": {"stages": [[1, 16], [1, 32], [1, 64]]},
    "train": {"steps": 400, "batch_size": 64, "lr": 0.1, "momentum": 0.9,
              "weight_decay": 5e-4, "warmup_steps": 50},
    "quant": {"weight_bits": 8, "act_bits": 8, "overrides": [], "calib_steps": 50,
              "calib_batch": 64, "calib_augment": True, "calib_per_class": 10},
    "generate": {"scheme": "bns", "samples": 256, "budget": 1000, "batch_size": 64,
                 "duplicates": 4, "augment": True, "lr": 0.1, "lr_drops": [800],
                 "lr_drop_factor": 0.1, "class_temp": 1.0, "prior_kernel": 5,
                 "prior_sigma": 1.0, "metric": "kl", "scales": []},
    "distill": {"objective": "KD+IQ+Mix", "alpha": 1.0, "beta": 0.01, "mix_rate": 0.5,
                "taps": ["stage1", "stage2", "stage3"], "lr": 0.1, "momentum": 0.9,
                "weight_decay": 0.0, "warmup_steps": 20, "steps": 2000, "batch_size": 64,
                "freeze_bn": False, "augment": True, "eval_every": 0},
    "measure": {"fgsm_eps": [0.1, 0.2], "noise_samples": 1000, "heldout_per_class": 100,
                "batch": 500},
}
GLOBAL_KEYS = {"seed": 0, "out": "runs/default"}
GEN_SCHEMES = ("bns", "bns+inception", "inception", "gaussian")


def default_config() -> dict:
    cfg = copy.deepcopy(GLOBAL_KEYS)
    cfg.update(copy.deepcopy(SECTIONS))
    return cfg


def merge_config(overrides: dict) -> dict:
    """Defaults updated by ``overrides``; unknown sections or keys raise ConfigError."""
    cfg = default_config()
    for key, value in overrides.items():
        if key in GLOBAL_KEYS:
            cfg[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            unknown = set(value) - set(SECTIONS[key])
            if unknown:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if cfg["generate"]["scheme"] not in GEN_SCHEMES:
        raise ConfigError(f"generate.scheme must be one of {GEN_SCHEMES}")
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return merge_config({})
    with open(path, "rb") as f:
        try:
            raw = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return merge_config(raw)


def quant_spec(cfg: dict) -> quant.QuantSpec:
    q = cfg["quant"]
    overrides = {}
    for item in q["overrides"]:
        if len(item) != 3:
            raise ConfigError("quant.overrides entries are [layer, weight_bits, act_bits]")
        overrides[str(item[0])] = (int(item[1]), int(item[2]))
    return quant.QuantSpec(int(q["weight_bits"]), int(q["act_bits"]), overrides)


def gen_config(cfg: dict, model: M.ResNetDesk) -> datagen.GenConfig:
    g = cfg["generate"]
    if g["scales"]:
        scales = tuple(float(s) for s in g["scales"])
        if len(scales) != 3:
            raise ConfigError("generate.scales is [stats, class, prior]")
    else:
        scales = datagen.SCHEME_SCALES[g["scheme"]]
    return datagen.GenConfig(
        stats_scale=scales[0], class_scale=scales[1], prior_scale=scales[2],
        budget=g["budget"], batch_size=g["batch_size"], input_shape=model.input_shape,
        num_classes=model.num_classes, class_temp=g["class_temp"], prior_kernel=g["prior_kernel"],
        prior_sigma=g["prior_sigma"], duplicates=g["duplicates"], augment=g["augment"], lr=g["lr"],
        lr_drops=tuple(g["lr_drops"]), lr_drop_factor=g["lr_drop_factor"], metric=g["metric"],
        seed=cfg["seed"])


def distill_config(cfg: dict) -> distill.DistillConfig:
    return distill.DistillConfig(**{**cfg["distill"], "seed": cfg["seed"]})


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class Run:
    """Output directory with resolved config, metrics stream and final report."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["out"])
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / "config.toml", "wb") as f:
            tomli_w.dump(cfg, f)
        self._metrics = open(self.dir / "metrics.jsonl", "w")

    def path(self, name: str) -> Path:
        return self.dir / name

    def metric(self, record: dict) -> None:
        self._metrics.write(json.dumps(record) + "\n")

    def finish(self, report: dict) -> None:
        self._metrics.close()
        self.path("report.json").write_text(json.dumps(report, indent=2) + "\n")
        click.echo(json.dumps(report, indent=2))


def _procedural(cfg: dict, split: str, per_class: Optional[int] = None) -> datasets.Dataset:
    d = cfg["data"]
    if per_class is None:
        per_class = d["per_class"] if split == "train" else d["val_per_class"]
    return datasets.make_procedural(d["classes"], per_class, d["split_seed"], split)


def _load_student(weights: str, state: Optional[str]):
    net = M.load_weights(weights)
    if state is None:
        return net
    return quant.restore_student(net, json.loads(Path(state).read_text()))


def _save_student(run: Run, student) -> None:
    M.save_weights(student, run.path("student.dfkd"))
    run.path("quant_state.json").write_text(json.dumps(quant.quant_state(student), indent=2) + "\n")


def write_ppm(path, image: torch.Tensor) -> None:
    """Binary PPM (P6) of a 3 x H x W float image in [0, 1]."""
    arr = datasets.to_uint8(image)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    c, h, w = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def _calibrated(teacher, cfg: dict, calib: datasets.Dataset, seed: int):
    q = cfg["quant"]
    student = quant.quantize_model(teacher, quant_spec(cfg), calib, q["calib_steps"], q["calib_batch"],
                                   seed, q["calib_augment"])
    return quant.freeze_activation_ranges(student)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _resolve(config, seed, out) -> dict:
    cfg = load_config(config)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


common = [
    click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--seed", type=int, default=None),
    click.option("--out", type=click.Path(file_okay=False), default=None),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Data-free quantization pipeline for the desk ResNet."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("DFKD_THREADS")
    if threads:
        torch.set_num_threads(max(int(threads), 1))


@main.command()
@with_common
def train(config, seed, out):
    """Train the float teacher on the procedural dataset."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    data, val = _procedural(cfg, "train"), _procedural(cfg, "val")
    mean, std = data.norm_stats()
    net = M.build_resnet_desk(tuple(tuple(s) for s in cfg["model"]["stages"]), cfg["data"]["classes"],
                              seed=cfg["seed"], norm_mean=mean, norm_std=std)
    tcfg = distill.TrainConfig(**cfg["train"], seed=cfg["seed"])
    torch.manual_seed(cfg["seed"])
    net, report = distill.train_classifier(net, data, tcfg, val, run.metric)
    M.save_weights(net, run.path("teacher.dfkd"))
    run.finish({"command": "train", "weights": str(run.path("teacher.dfkd")), "val": report.as_dict()})


@main.command()
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dump-images", "dump", type=int, default=0, help="write the first N samples as PPM")
def generate(config, seed, out, weights, dump):
    """Synthesize a dataset from the teacher's BN statistics."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    net = M.load_weights(weights)
    g = cfg["generate"]
    if g["scheme"] == "gaussian" and not g["scales"]:
        mean, std = net.normalize.mean.numpy(), net.normalize.std.numpy()
        batch = datagen.generate_gaussian(g["samples"], mean, std, net.input_shape, cfg["seed"], net)
        ref = M.extract_bn_reference(net, dataset_norm=True)
        batch.j_kl = datagen.j_kl(batch.samples, net, ref).item()
        initial = batch.j_kl
    else:
        gcfg = gen_config(cfg, net)
        ref = M.extract_bn_reference(net, dataset_norm=True)
        counter = {"batch": 0, "initial": None}

        def on_step(rec):
            if rec.step == 0:
                counter["batch"] += 1
                if counter["initial"] is None:
                    counter["initial"] = rec.j_kl
            run.metric({"batch": counter["batch"], **rec.as_dict()})

        batch = datagen.generate_many(net, ref, gcfg, g["samples"], on_step=on_step)
        initial = counter["initial"]
    ds = batch.to_dataset(num_classes=net.num_classes)
    datasets.save_dataset(ds, run.path("synthetic.dfds"))
    dumps = min(dump, len(batch))
    if dumps:
        img_dir = run.path("images")
        img_dir.mkdir(exist_ok=True)
        for i in range(dumps):
            write_ppm(img_dir / f"{i:05d}.ppm", ds.float_images([i])[0])
    run.finish({"command": "generate", "scheme": batch.scheme, "samples": len(batch),
                "initial_j_kl": initial, "final_j_kl": batch.j_kl, "images_dumped": dumps,
                "dataset": str(run.path("synthetic.dfds"))})


def _calib_data(cfg, path):
    if path is not None:
        return datasets.load_dataset(path)
    return datasets.subsample_balanced(_procedural(cfg, "train"), cfg["quant"]["calib_per_class"], cfg["seed"])


@main.command()
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="calibration dataset file (default: real subset of the train split)")
@click.option("--seeds", type=int, default=1, help="repeat calibration with K seeds")
def calibrate(config, seed, out, weights, data, seeds):
    """Calibrate a fake-quantized student and report its accuracy."""
    cfg = _resolve(config, seed, out)
    if seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    run = Run(cfg)
    teacher = M.load_weights(weights)
    val = _procedural(cfg, "val")
    fp32 = distill.evaluate(teacher, val)
    reports, first = [], None
    for k in range(seeds):
        s = cfg["seed"] + k
        student = _calibrated(teacher, cfg, _calib_data(cfg, data), s)
        rep = distill.evaluate(student, val)
        run.metric({"seed": s, "top1": rep.top1})
        reports.append(rep)
        if first is None:
            first = student
    _save_student(run, first)
    agg = distill.EvalReport.aggregate(reports)
    run.finish({"command": "calibrate", "fp32": fp32.as_dict(), "quantized": agg.as_dict(),
                "mean": agg.top1, "std": agg.top1_std, "seeds": seeds})


@main.command(name="distill")
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--calib-data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="calibration dataset file (default: --data)")
def distill_cmd(config, seed, out, weights, data, calib_data):
    """Calibrate on the given data, then fine-tune the student by distillation."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    teacher = M.load_weights(weights)
    train_ds = datasets.load_dataset(data, num_classes=teacher.num_classes)
    calib = datasets.load_dataset(calib_data) if calib_data else train_ds
    val = _procedural(cfg, "val")
    student = _calibrated(teacher, cfg, calib, cfg["seed"])
    before = distill.evaluate(student, val)
    dcfg = distill_config(cfg)
    if dcfg.objective == "CE":
        student, report = distill.finetune_ce(student, train_ds, dcfg, val, run.metric)
    else:
        student, report = distill.distill(teacher, student, train_ds, dcfg, val, run.metric)
    _save_student(run, student)
    run.finish({"command": "distill", "objective": dcfg.objective, "calibrated": before.as_dict(),
                "final": report.as_dict()})


@main.command(name="eval")
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--quant-state", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="labeled dataset file (default: procedural val split)")
def eval_cmd(config, seed, out, weights, quant_state, data):
    """Top-1 and per-class accuracy of a float or quantized model."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    net = _load_student(weights, quant_state)
    ds = datasets.load_dataset(data, num_classes=net.num_classes) if data else _procedural(cfg, "val")
    run.finish({"command": "eval", "report": distill.evaluate(net, ds).as_dict()})


@main.command()
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "extra", multiple=True, type=(str, click.Path(exists=True, dir_okay=False)),
              help="NAME PATH of an extra dataset to probe")
def measure(config, seed, out, weights, extra):
    """J_KL similarity table over train, held-out, FGSM and noise datasets."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    m = cfg["measure"]
    net = M.load_weights(weights)
    ref = M.extract_bn_reference(net, dataset_norm=True)
    held = _procedural(cfg, "val", m["heldout_per_class"])
    probes = {"train": _procedural(cfg, "train"), "heldout": held}
    for eps in m["fgsm_eps"]:
        probes[f"fgsm_{eps:g}"] = analysis.fgsm_perturb(net, held, float(eps))
    probes["noise"] = datasets.make_uniform_noise(m["noise_samples"], net.input_shape, cfg["seed"])
    for name, path in extra:
        ds = datasets.load_dataset(path)
        probes[name] = analysis.adapt_dataset(ds, net.input_shape, (net.normalize.mean.numpy(),
                                                                  net.normalize.std.numpy()))
    table = analysis.similarity_table(net, ref, probes, "train", Path(weights).stem, m["batch"])
    for name in probes:
        run.metric({"dataset": name, "j_kl": table.raw[name], "ratio": table.ratio[name]})
    click.echo(table.format_table())
    run.finish({"command": "measure", **table.as_dict()})


@main.command(name="analyze-bias")
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--quant-state", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="dataset file (default: procedural val split)")
def analyze_bias(config, seed, out, weights, quant_state, data):
    """Mean soft and hard predictions over a dataset."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    net = _load_student(weights, quant_state)
    ds = datasets.load_dataset(data, num_classes=net.num_classes) if data else _procedural(cfg, "val")
    rep = analysis.bias_report(net, ds)
    run.finish({"command": "analyze-bias", **rep.as_dict(), "max_hard": rep.max_hard})


@main.command(name="analyze-tail")
@with_common
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False), help="float model")
@click.option("--student", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--quant-state", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bias-data", required=True, type=click.Path(exists=True, dir_okay=False),
              help="generated dataset whose hard-prediction frequencies order the classes")
def analyze_tail(config, seed, out, weights, student, quant_state, bias_data):
    """Mean relative accuracy loss over the least-predicted classes."""
    cfg = _resolve(config, seed, out)
    run = Run(cfg)
    teacher = M.load_weights(weights)
    stud = _load_student(student, quant_state)
    val = _procedural(cfg, "val")
    bias = analysis.bias_report(teacher, datasets.load_dataset(bias_data, num_classes=teacher.num_classes))
    rep = analysis.tail_degradation(distill.evaluate(teacher, val), distill.evaluate(stud, val), bias)
    run.finish({"command": "analyze-tail", **rep.as_dict()})


def cli(argv=None) -> int:
    """Entry point that maps library errors to a message and exit code 1."""
    try:
        main.main(args=argv, prog_name="dfkd", standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except DFKDError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except (OSError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    return 0


def entry() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    entry()
