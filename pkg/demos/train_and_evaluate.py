"""
Training a parser on synthetic figures
======================================

Generate a small synthetic set, train a plain network and one with
intra-graph reasoning for the same number of steps, and compare their
test mIoU.  A couple of minutes on one core; raise STEPS and N_TRAIN for
clearer gaps (the acceptance study uses 1000 steps on 1000 images).
"""
import time

import numpy as np

from graphparse import metrics
from graphparse.model import ModelConfig, SegmentationModel
from graphparse.synthdata import generate_split
from graphparse.trainer import TrainConfig, fit, predict_all

N_TRAIN, N_TEST, STEPS = 200, 50, 150
train = generate_split(0, "train", "coarse", N_TRAIN)
test = generate_split(0, "test", "coarse", N_TEST)
images = np.stack([s.image for s in test])
config = TrainConfig(base_lr=0.1, steps=STEPS)

for name, graph in [("plain", False), ("intra-graph", True)]:
    model = SegmentationModel(ModelConfig(datasets=("coarse",), graph=graph))
    t0 = time.perf_counter()
    history = fit(model, {"coarse": train}, config)
    pred = predict_all(model, images, ["coarse"])["coarse"]
    cm = metrics.ConfusionMatrix.empty(7)
    for p, s in zip(pred, test):
        cm = metrics.accumulate(cm, p, s.masks["coarse"])
    res = metrics.compute(cm)
    print(f"{name:<12} loss {history[-1].loss:.3f}  mIoU {100 * res['mean_iou']:.2f}  "
          f"({time.perf_counter() - t0:.0f}s)")

print()
print(metrics.format_report(res, model.taxonomy.labels["coarse"], title="intra-graph model"))
