"""Ablation sweeps: projector width and the fraction of data used to fit it.

Reconstruction error falls with width, and saturates in the fraction of
training sequences the projector sees.
"""

from ipakit import config
from ipakit.analysis import non_increasing_within_band, run_sweep
from ipakit.nanomodel import pretrain_host
from ipakit.pipeline import settings_from_config

cfg = config.resolve()
host = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
adapter, projector = settings_from_config(cfg, "ipa")
task, tc, seeds = config.task_spec(cfg), config.train_config(cfg, "ipa"), [0, 1, 2]

dims = run_sweep("hidden_dim", [2, 4, 8, 16], host, task, adapter, projector, tc, seeds)
print(dims.summary())
fracs = run_sweep("pretrain_fraction", [0.01, 0.1, 1.0], host, task, adapter, projector, tc, seeds)
print(fracs.summary())
print("recon error non-increasing in fraction:", non_increasing_within_band(fracs))
