"""Pilot: gauge surrogate difficulty for the desk-scale experiment.

Trains a mid-size net and the small student briefly on the surrogate to
check the capacity gap and headroom before committing to the full runs.
"""

import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import numpy as np

import _surrogate
from spdistill import models, trainer
from spdistill.data import DataSplit, load_cifar10
from spdistill.losses import DistillConfig
from spdistill.trainer import TrainConfig

DATA_DIR = os.environ.get("PILOT_DATA", "/tmp/surrogate_pilot")
N_TRAIN = int(os.environ.get("PILOT_TRAIN", "4000"))
EPOCHS = int(os.environ.get("PILOT_EPOCHS", "12"))


def main():
    os.makedirs(DATA_DIR, exist_ok=True)
    imgs, labels = _surrogate.generate(N_TRAIN + 2000, seed=11)
    train = DataSplit(imgs[:N_TRAIN], labels[:N_TRAIN])
    test = DataSplit(imgs[N_TRAIN:], labels[N_TRAIN:])

    cfg = TrainConfig(
        epochs=EPOCHS, lr=0.1, lr_milestones=(int(EPOCHS * 0.6), int(EPOCHS * 0.85)),
        seed=0, augment=False, distill=DistillConfig(method="none"),
    )
    for name, spec in (
        ("student d2k1", models.ConvNetSpec(2, 1)),
        ("mid d3k2", models.ConvNetSpec(3, 2)),
    ):
        net = models.build(spec, seed=0)
        t0 = time.time()
        res = trainer.train_distilled(net, cfg, train, test)
        trace = [round(float(r["test_error"]), 1) for r in res.metrics]
        print(
            f"{name}: {time.time()-t0:.0f}s  final test {res.final_test_error:.1f}% "
            f"train {res.final_train_error:.1f}%  trace {trace}",
            flush=True,
        )


if __name__ == "__main__":
    main()
