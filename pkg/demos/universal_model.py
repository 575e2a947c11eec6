"""
One model for three label sets
==============================

Train a single network whose three graphs exchange information along the
label hierarchy, then segment one test image at every granularity and
check how often, over the test set, the fine prediction, mapped up the hierarchy, agrees with
the coarse one.
"""
import numpy as np

from graphparse import metrics
from graphparse.model import ModelConfig, SegmentationModel, bidirectional_edges
from graphparse.synthdata import generate_scene, generate_split, sample_seed
from graphparse.taxonomy import load_taxonomy, projection_lut
from graphparse.trainer import TrainConfig, fit

tax = load_taxonomy()
datasets = ("coarse", "mid", "fine")
edges = bidirectional_edges([("coarse", "mid"), ("mid", "fine")])
model = SegmentationModel(ModelConfig(datasets=datasets, transfers=edges), tax)

# every label set has its own images; batches never mix label sets
data = {ds: generate_split(1, "train", ds, 200) for ds in datasets}
history = fit(model, data, TrainConfig(base_lr=0.1, steps=600))
print("batches per label set:", {ds: sum(h.dataset == ds for h in history) for ds in datasets})

sample = generate_scene(sample_seed(1, "test", "fine", 0))
pred = model.predict(sample.image[None], datasets)
for ds in datasets:
    acc = float(np.mean(pred[ds][0] == sample.masks[ds]))
    print(f"{ds:<7} pixel accuracy {acc:.3f}, labels predicted: {np.unique(pred[ds][0]).size}")

# the same comparison over fifty test images
test = generate_split(1, "test", "fine", 50)
pred = model.predict(np.stack([s.image for s in test]), datasets)
lut = projection_lut(tax, "fine", "coarse")
print("fine->coarse consistency", metrics.hierarchy_consistency(pred["fine"], pred["coarse"], lut))
