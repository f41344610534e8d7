"""Deep over-sampling on a 2-D toy problem.

Three Gaussian classes, the third one ten times smaller. We train the same
small network twice: plain single-task training, and deep over-sampling,
where every minority sample is repeated as r weighted instances whose
targets are convex combinations of its in-class neighbors in the embedding.
"""
import numpy as np

from deep_oversampling import (Dataset, NetworkConfig, TrainPlan, build_weighted_set,
                               compute_embeddings, predict_proba, suggest_params, train_dos,
                               train_stl)
from deep_oversampling.trainer import class_plan


def toy(seed, counts, centers=((0.0, 0.0), (2.5, 0.0), (1.25, 2.0))):
    rng = np.random.default_rng(seed)
    xs = [np.asarray(c) + rng.standard_normal((n, 2)) for c, n in zip(centers, counts)]
    y = np.repeat(np.arange(len(counts)), counts)
    return Dataset(np.concatenate(xs).reshape(-1, 1, 1, 2).astype(np.float32), y,
                   len(counts), minority_classes=(2,))


train, test = toy(0, [300, 300, 30]), toy(1, [300, 300, 300])
config = NetworkConfig(input_shape=(1, 1, 2), conv_filters=[], fc_widths=[16, 8],
                       n_classes=3, learning_rate=0.05, batch_size=30, alpha=0.1)

# %% how much to over-sample
s = suggest_params(train.class_counts(), train.minority_classes)
print(f"minority/majority ratio R = {s.R} -> r in [{s.r_range[0]}, {s.r_range[1]}], k_mnr = {s.k_mnr}")

plan = TrainPlan(k_mnr=5, rounds=3, stl_epochs=10, seed=0)
k, r = class_plan(train, plan)
print("k per class", k, "r per class", r)

# %% one look at the weighted set built from a freshly initialized run
params = train_stl(config, train, 1, seed=0)
store = compute_embeddings(config, params, train)
z = build_weighted_set(store, train, k, r, seed=0)
inst = next(w for w in z if w.y == 2)
print(f"{len(z)} weighted instances; sample {inst.sample_index} uses neighbors "
      f"{inst.neighbor_indices.tolist()} with weights {np.round(inst.weights.astype(float), 3).tolist()}")

# %% train both and compare on a balanced test set
stl = train_stl(config, train, plan.stl_epochs + plan.rounds, seed=0)
dos = train_dos(config, train, plan)
for name, p in (("STL", stl), ("DOS", dos)):
    pred = predict_proba(config, p, test.x).argmax(axis=1)
    recall = [np.mean(pred[test.y == c] == c) for c in range(3)]
    print(name, "per-class recall", np.round(recall, 3))
