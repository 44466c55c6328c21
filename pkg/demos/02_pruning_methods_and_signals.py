"""The three pruning methods and the accuracy-vector detection signal.

Trains one clean and one poisoned model on the same data, then shows how
targeted low-to-high-norm filter pruning degrades their clean-data
accuracies differently.

Run:  python demos/02_pruning_methods_and_signals.py   (about a minute)
"""

import numpy as np

from prunetect import forge, nn, probe, synth, zoo
from prunetect.pruning import (
    PruningConfig,
    derive_p_coverage,
    derive_p_min_layer,
    plan_samples,
    prune,
    rank_filters,
    search_space_size,
)

SEED = 4
train = synth.gen_dataset(5, 60, 24, 24, seed=SEED)
eval_ds = synth.gen_dataset(5, 10, 24, 24, seed=SEED + 1000)

print("== forge a clean and a poisoned sibling ==")
clean = zoo.build("toycnn-a", seed=SEED)
forge.train_model(clean, train.images, train.labels, epochs=12, lr=0.1,
                  batch_size=32, seed=SEED)

rng = np.random.default_rng(SEED)
trigger = synth.sample_trigger(rng, 5, 24, 24)
poisoned_images, poisoned_labels, frac = synth.poison_dataset(
    train, trigger, poison_rate=0.25, seed=SEED)
poisoned = zoo.build("toycnn-a", seed=SEED + 1)
forge.train_model(poisoned, poisoned_images, poisoned_labels, epochs=12, lr=0.1,
                  batch_size=32, seed=SEED + 1)
print(f"trigger: {len(trigger.polygon)}-gon targeting class {trigger.target_class}, "
      f"{frac:.0%} of training images relabeled")
print(f"clean model    acc {nn.accuracy(clean, eval_ds.images, eval_ds.labels):.2f}")
print(f"poisoned model acc {nn.accuracy(poisoned, eval_ds.images, eval_ds.labels):.2f} "
      f"(trigger success "
      f"{forge.trigger_success_rate(poisoned, eval_ds.images, eval_ds.labels, trigger):.2f})")

print("\n== search space and derived sampling probabilities ==")
full, reduced = search_space_size(clean)
print(f"all filter subsets: {full:.3e}; after ranking: {reduced}")
print(f"p so every layer loses a filter: {derive_p_min_layer(clean):.4f}")
print(f"p so every filter is pruned once over |S|=5: {derive_p_coverage(1, 5):.2f}")

print("\n== the three pruning methods on one filter block ==")
ranking = rank_filters(clean, "l1")
plan = plan_samples(ranking, p=0.2, num_samples=5, sm="targeted")
for pm in ("remove", "reset", "trim"):
    variant = prune(clean, plan.samples[0], pm, trim_k=0.5)
    acc = nn.accuracy(variant, eval_ds.images, eval_ds.labels)
    print(f"{pm:6s}: params {nn.parameter_count(clean)} -> "
          f"{nn.parameter_count(variant)}, lowest-norm block pruned, acc {acc:.2f}")

print("\n== accuracy vectors over the 5 targeted blocks (the signal) ==")
config = PruningConfig(pm="remove", sm="targeted", rm="l1", p=0.0625,
                       num_samples=5, num_images=10)
for name, model in (("clean", clean), ("poisoned", poisoned)):
    vec = probe.measure(model, config, eval_ds.images, eval_ds.labels, name)
    print(f"{name:9s} A = {np.round(vec.values, 2)}   ({vec.elapsed_seconds * 1e3:.0f} ms)")
print("poisoned models tend to lose more clean accuracy per pruned block:")
print("the trigger competes with class features for the same filters.")
