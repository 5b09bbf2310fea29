"""End-to-end fine-tuning of LoRA, DoRA and IPA adapters on one task.

The pipeline pretrains IPA projectors on captured features, attaches
adapters, trains them with Adam (warmup plus linear decay) and evaluates.
"""

from ipakit import config
from ipakit.nanomodel import pretrain_host
from ipakit.pipeline import run_pipeline, settings_from_config

cfg = config.resolve()
host = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
task = config.task_spec(cfg)

for variant in ("lora", "dora", "ipa"):
    adapter, projector = settings_from_config(cfg, variant)
    res = run_pipeline(host, task, adapter, projector, config.train_config(cfg, variant))
    print(f"{variant}: eval acc {res.eval_acc:.4f}  loss {res.init_loss:.3f} -> "
          f"{res.final_loss:.3f}  trainable {res.adapted.n_trainable()}  "
          f"recon {res.recon_error:.3f}")
