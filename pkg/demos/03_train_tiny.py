"""Train the three detector variants briefly on synthetic shapes.

A short version of the desk-scale experiment (a few epochs on a small set)
so it finishes in well under a minute on one core.

Run: python3 demos/03_train_tiny.py [epochs]
"""
import sys

from scconvdet.data import LabeledImage, SyntheticSpec, render_synthetic
from scconvdet.model import BackboneConfig, build_model, format_stats_table, model_stats
from scconvdet.train import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

rendered = render_synthetic(SyntheticSpec(80, seed=0))
items = [LabeledImage(img, lb, f"{i:05d}.ppm") for i, (img, lb) in enumerate(rendered)]
tr, te = items[:64], items[64:]

stats = {}
for kind in ("none", "se", "scconv"):
    model = build_model(BackboneConfig(), kind, 3, seed=0)
    stats[kind] = model_stats(model)
    res = train(model, tr, TrainConfig(epochs=epochs), rng_seed=0, test=te)
    losses = ", ".join(f"{e.train_loss:.3f}" for e in res.log)
    print(f"{kind:>7}: loss [{losses}]  final mAP50 {res.log[-1].map50:.3f}  ({res.seconds:.0f}s)")

print()
print(format_stats_table(stats))
