"""How the default learning rates were chosen.

A coarse grid per variant on the default task, averaged over three seeds
held out from the analysis seeds. LoRA and DoRA peak near 0.03, IPA near
0.3 (its B sees inputs of unit-scale projections with lambda = alpha / d_h).
The fixed-projector study picks one rate per cell from the same grid, since
freezing a factor changes the best rate; the chosen values live in
fixed_proj.json. Takes about two minutes on one CPU.
"""

from ipakit import config
from ipakit.analysis import lr_grid_search
from ipakit.nanomodel import pretrain_host
from ipakit.pipeline import settings_from_config

GRID = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0]
SEEDS = [100, 101, 102]

cfg = config.resolve()
host = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
task = config.task_spec(cfg)
for variant in ("lora", "dora", "ipa"):
    adapter, projector = settings_from_config(cfg, variant)
    accs = lr_grid_search(host, task, variant, GRID, SEEDS, adapter, projector,
                          config.train_config(cfg, variant))
    best = max(accs, key=accs.get)
    print(variant, " ".join(f"{lr:g}:{a:.4f}" for lr, a in accs.items()), "best", best)
