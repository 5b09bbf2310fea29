"""One end-to-end run: collect features, fit projectors, attach, train, evaluate."""

from dataclasses import asdict, dataclass, replace

import numpy as np

from .nanomodel import attach_adapters, collect_features, evaluate
from .projector import fit_projector, reconstruction_error
from .trainer import train


@dataclass(frozen=True)
class AdapterSettings:
    variant: str = "ipa"
    rank: int = 4
    scale: float = 0.25  # lambda = alpha / rank
    proj_ft: bool = None  # None: train A for LoRA/DoRA, freeze U for IPA
    seed: int = 0

    @property
    def alpha(self):
        return self.scale * self.rank


@dataclass(frozen=True)
class ProjectorSettings:
    algorithm: str = "ipca"
    centered: bool = False
    fraction: float = 0.1
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3
    complete_basis: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class RunResult:
    adapted: object
    log: object
    projectors: dict
    eval_acc: float
    init_loss: float
    final_loss: float
    recon_error: float  # mean over target weights; nan for LoRA/DoRA

    def metrics(self):
        return {"eval_acc": self.eval_acc, "final_loss": self.final_loss,
                "recon_error": self.recon_error}


def settings_from_config(cfg, variant=None):
    """``(AdapterSettings, ProjectorSettings)`` from a resolved config dict."""
    from .config import scale_for

    a = cfg["adapter"]
    variant = variant or a["variant"]
    adapter = AdapterSettings(variant=variant, rank=a["rank"], scale=scale_for(cfg, variant),
                              proj_ft=a["proj_ft"], seed=a["seed"])
    return adapter, ProjectorSettings(**cfg["projector"])


def fit_projectors(model, task, rank, ps, features=None):
    """One projector per target weight, fitted on a ``ps.fraction`` training subset."""
    features = features or collect_features(model, task, ps.fraction, ps.seed)
    return {
        name: fit_projector(fs, rank, ps.algorithm, centered=ps.centered, batch_size=ps.batch_size,
                            epochs=ps.epochs, learning_rate=ps.lr, seed=ps.seed,
                            complete_basis=ps.complete_basis)
        for name, fs in features.items()
    }


def mean_reconstruction_error(projectors, features):
    return float(np.mean([reconstruction_error(projectors[n], features[n]) for n in projectors]))


def final_loss(log):
    """Mean training loss over the last tenth of the steps (at least one)."""
    k = max(1, len(log.losses) // 10)
    return float(np.mean(log.losses[-k:]))


def run_pipeline(model, task, adapter, projector, train_config, recon_features=None):
    """Full adaptation run.

    For IPA the projectors are fitted first; their reconstruction error is
    reported on ``recon_features`` (defaults to the fitting subset).
    """
    projectors, recon = None, float("nan")
    if adapter.variant == "ipa":
        feats = collect_features(model, task, projector.fraction, projector.seed)
        projectors = fit_projectors(model, task, adapter.rank, projector, feats)
        recon = mean_reconstruction_error(projectors, recon_features or feats)
    ad = attach_adapters(model, adapter.variant, adapter.rank, adapter.alpha, projectors,
                         proj_trainable=adapter.proj_ft, seed=adapter.seed)
    ad.seeds = {"adapter": adapter.seed, "projector": projector.seed, "train": train_config.seed,
                "task": task.seed}
    out, log = train(ad, task, train_config)
    return RunResult(adapted=out, log=log, projectors=projectors or {},
                     eval_acc=evaluate(out, task), init_loss=float(log.losses[0]),
                     final_loss=final_loss(log), recon_error=recon)


def with_seed(task, adapter, projector, train_config, seed):
    """Replicate of a run under one seed: task inputs, A_0, subset and batches all move."""
    return (replace(task, seed=task.seed + seed), replace(adapter, seed=seed),
            replace(projector, seed=seed), replace(train_config, seed=seed))
