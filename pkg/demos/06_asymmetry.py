"""Asymmetry of LoRA's factors across tasks.

Six tasks share inputs and the initial A_0 but differ in labels. After
training, A barely leaves A_0 while B is task specific: cos(A_j, A_0) stays
high and the B task-task similarities are much lower.
"""

from ipakit import config
from ipakit.analysis import asymmetry_study, matrix_csv, task_family
from ipakit.nanomodel import pretrain_host
from ipakit.pipeline import settings_from_config

cfg = config.resolve()
host = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
adapter, projector = settings_from_config(cfg, "lora")
tasks = task_family(config.task_spec(cfg), 6)
rep = asymmetry_study(host, tasks, adapter, projector, config.train_config(cfg, "lora"))
print(rep.summary())
print(matrix_csv(rep.task_task_b, rep.task_ids))
