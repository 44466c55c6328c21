"""Build a toy CNN, train it on synthetic classes, and round-trip it
through the binary model store.

Run:  python demos/01_tiny_cnn_and_model_store.py
"""

import os
import tempfile

import numpy as np

from prunetect import forge, nn, store, synth, zoo

print("== dataset: 5 synthetic classes, 24x24, pattern + noise ==")
train = synth.gen_dataset(num_classes=5, per_class_count=40, height=24, width=24, seed=0)
held_out = synth.gen_dataset(num_classes=5, per_class_count=10, height=24, width=24, seed=999)
print(f"train images {train.images.shape}, values in "
      f"[{train.images.min():.2f}, {train.images.max():.2f}]")

print("\n== train toycnn-a for a few epochs ==")
model = zoo.build("toycnn-a", seed=42)
forge.train_model(model, train.images, train.labels, epochs=6, lr=0.1,
                  batch_size=32, seed=42)
print(f"train accuracy    {nn.accuracy(model, train.images, train.labels):.3f}")
print(f"held-out accuracy {nn.accuracy(model, held_out.images, held_out.labels):.3f}")

print("\n== model store round trip ==")
with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "model.prnt")
    store.save(model, path)
    size = os.path.getsize(path)
    print(f"file size {size} bytes = fixed header {store.HEADER_SIZE} + "
          f"8 * {nn.parameter_count(model)} parameters")
    reloaded = store.load(path)
    x = held_out.images[:4]
    assert np.array_equal(nn.forward(model, x), nn.forward(reloaded, x))
    print("reloaded model produces bit-identical logits")

print("\n== graph fingerprint (weights excluded) ==")
fp = store.fingerprint(model)
print(fp.canonical_text)
print(f"digest {fp.digest[:32]}...")
other_seed = zoo.build("toycnn-a", seed=7)
print(f"same architecture, different weights -> same digest: "
      f"{store.fingerprint(other_seed) == fp}")
