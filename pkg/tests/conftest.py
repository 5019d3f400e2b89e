import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_setup():
    """A briefly trained desk model plus its train/val data (seconds, not minutes)."""
    from dfkd import model as M
    from dfkd.datasets import make_procedural
    from dfkd.distill import TrainConfig, train_classifier

    train = make_procedural(per_class=30, split="train")
    val = make_procedural(per_class=20, split="val")
    mean, std = train.norm_stats()
    net = M.build_resnet_desk(seed=0, norm_mean=mean, norm_std=std)
    torch.manual_seed(0)
    net, report = train_classifier(net, train, TrainConfig(steps=60, batch_size=32, warmup_steps=10), val)
    return net, train, val, report
