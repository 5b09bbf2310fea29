"""Freezing the down-projection: pretrained U against a random A.

With rank below the task's intrinsic dimension, a frozen random A throws
away task information while a frozen PCA projector keeps the dominant
directions. At a control rank equal to the intrinsic dimension the gap
should vanish into seed noise. Runs the packaged fixed_proj.json setup
(about a minute on one CPU).
"""

from ipakit import config
from ipakit.analysis import compare_fixed_projector
from ipakit.nanomodel import pretrain_host
from ipakit.pipeline import settings_from_config

cfg = config.resolve("pkg:fixed_proj.json")
host = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
ads = {v: settings_from_config(cfg, v)[0] for v in ("lora", "ipa")}
tcs = {v: config.train_config(cfg, v) for v in ("lora", "ipa")}
_, projector = settings_from_config(cfg, "ipa")

a = cfg["analysis"]
rep = compare_fixed_projector(host, config.task_spec(cfg), a["seeds"], cfg["adapter"]["rank"],
                              ads, projector, tcs, a["control_rank"], cell_lr=a["cell_lr"])
print(rep.summary())
