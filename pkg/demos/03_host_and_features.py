"""The tiny transformer host, synthetic tasks and feature collection.

The host is pretrained once on a pretext task and then frozen. Features are
the inputs each target weight sees, captured before any adapter runs.
"""

import numpy as np

from ipakit.nanomodel import ModelConfig, TaskSpec, collect_features, make_dataset, pretrain_host

host = pretrain_host(ModelConfig())
print("host", host.model_hash[:16], "targets", host.config.target_names())

# %% tasks share inputs when they share a seed; labels depend on task_id too
task = TaskSpec(intrinsic_dim=12)
data = make_dataset(task, host.config.vocab, host.config.seq_len, host.config.n_classes)
print("train", data.train_x.shape, "label counts", np.bincount(data.train_y))

# %% 10% of the training sequences, one row per token position
feats = collect_features(host, task, fraction=0.1, seed=0)
for name, fs in list(feats.items())[:3]:
    ev = np.linalg.eigvalsh(fs.data.T @ fs.data / fs.n)[::-1]
    top4 = ev[:4].sum() / ev.sum()
    print(f"{name}: {fs.n} rows, {np.sum(ev > 1e-10 * ev[0])} nonzero eigenvalues, "
          f"top 4 carry {top4:.1%} of the energy")
