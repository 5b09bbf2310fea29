"""Diagnostics over trained adapters: asymmetry similarity matrices and ablation sweeps.

* :func:`similarity_matrices` -- cosine similarities between flattened
  down-projections (``A`` / ``U``), up-projections (``B``) and the shared
  initial ``A_0`` across a family of tasks;
* :func:`run_sweep` -- repeat the full pipeline over one ablation axis
  (hidden dimension, pretraining fraction or projector algorithm);
* :func:`compare_fixed_projector` -- LoRA vs IPA with the down-projection
  frozen or trainable, plus a control where nothing can be lost.

Every aggregate reports the per-seed values and the seed band
(``max - min`` across seeds).
"""

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import IpaAdapter
from .matcore import cosine
from .nanomodel import collect_features
from .nanomodel.tasks import make_dataset
from .nanomodel.transformer import TinyTransformer, loss_and_grads
from .pipeline import AdapterSettings, ProjectorSettings, run_pipeline, with_seed
from .trainer import TrainConfig, run_adam

AXES = ("hidden_dim", "pretrain_fraction", "algorithm")
METRICS = ("eval_acc", "final_loss", "recon_error")


def _fmt(x):
    return repr(float(x))


# -- asymmetry -----------------------------------------------------------------


@dataclass
class TaskVectors:
    """Flattened adapter matrices of one task, concatenated over target weights."""

    theta_a: np.ndarray
    theta_b: np.ndarray
    theta_a_init: np.ndarray

    def __post_init__(self):
        if self.theta_a.shape != self.theta_a_init.shape:
            raise ValueError("theta_a and theta_a_init differ in length")


def _down(ad):
    return ad.proj.u if isinstance(ad, IpaAdapter) else ad.a


def task_vectors(adapted, initial):
    """TaskVectors of a trained model against its untrained starting point."""
    names = sorted(adapted.adapters)
    if names != sorted(initial.adapters):
        raise ValueError("trained and initial adapters cover different weights")
    cat = lambda mats: np.concatenate([m.ravel() for m in mats])  # noqa: E731
    return TaskVectors(
        theta_a=cat(_down(adapted.adapters[n]) for n in names),
        theta_b=cat(adapted.adapters[n].b for n in names),
        theta_a_init=cat(_down(initial.adapters[n]) for n in names),
    )


def cosine_matrix(vectors):
    """Symmetric matrix of pairwise cosines with an exact unit diagonal."""
    n = len(vectors)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine(vectors[i], vectors[j])
    return out


def similarity_matrices(tvs):
    """``(task_init_a, task_task_a, task_task_b)`` for a list of TaskVectors.

    Raises ValueError when a vector has zero norm (for instance ``B`` that
    was never trained).
    """
    if len(tvs) < 2:
        raise ValueError("need at least two tasks")
    if len({tv.theta_a.shape for tv in tvs}) != 1 or len({tv.theta_b.shape for tv in tvs}) != 1:
        raise ValueError("task vectors have inconsistent dimensions")
    task_init_a = np.array([cosine(tv.theta_a, tv.theta_a_init) for tv in tvs])
    return (task_init_a, cosine_matrix([tv.theta_a for tv in tvs]),
            cosine_matrix([tv.theta_b for tv in tvs]))


def off_diagonal(m):
    return m[~np.eye(m.shape[0], dtype=bool)]


@dataclass
class SimilarityReport:
    task_ids: list
    task_init_a: np.ndarray
    task_task_a: np.ndarray
    task_task_b: np.ndarray
    final_losses: list
    eval_accs: list
    task_task_w: np.ndarray = None  # full fine-tuning updates, when requested

    def summary(self):
        lines = [
            f"mean cos(A_j, A_0)          {np.mean(self.task_init_a):.4f}",
            f"mean |offdiag| task-task A  {np.mean(np.abs(off_diagonal(self.task_task_a))):.4f}",
            f"mean |offdiag| task-task B  {np.mean(np.abs(off_diagonal(self.task_task_b))):.4f}",
        ]
        if self.task_task_w is not None:
            lines.append(
                f"mean |offdiag| full FT dW   {np.mean(np.abs(off_diagonal(self.task_task_w))):.4f}")
        lines.append("final losses " + " ".join(f"{x:.4f}" for x in self.final_losses))
        return "\n".join(lines) + "\n"


def matrix_csv(m, labels):
    buf = io.StringIO()
    buf.write("," + ",".join(labels) + "\n")
    for lab, row in zip(labels, m):
        buf.write(lab + "," + ",".join(_fmt(x) for x in row) + "\n")
    return buf.getvalue()


def full_ft_delta(model, task, config, names):
    """Concatenated ``W_T - W_0`` over ``names`` after full fine-tuning on ``task``."""
    cfg = model.config
    data = make_dataset(task, cfg.vocab, cfg.seq_len, cfg.n_classes)
    start = model.params()

    def grad_fn(current, idx):
        m = TinyTransformer(cfg, current)
        loss, pg, _ = loss_and_grads(m, data.train_x[idx], data.train_y[idx], weight_grads=True)
        return loss, pg

    params, _, _ = run_adam(dict(start), grad_fn, config, data.train_x.shape[0])
    return np.concatenate([(params[n] - start[n]).ravel() for n in names])


def asymmetry_study(model, tasks, adapter, projector, train_config, full_ft_config=None):
    """Train one adapter set per task from a shared ``A_0`` and compare them.

    All tasks use ``adapter.seed`` (hence the same ``A_0``) and the same
    ``train_config``; they should share inputs and differ in their labels.
    """
    from .nanomodel import attach_adapters
    from .pipeline import fit_projectors

    tvs, losses, accs = [], [], []
    for task in tasks:
        projectors = None
        if adapter.variant == "ipa":
            projectors = fit_projectors(model, task, adapter.rank, projector)
        init = attach_adapters(model, adapter.variant, adapter.rank, adapter.alpha, projectors,
                               adapter.proj_ft, adapter.seed)
        res = run_pipeline(model, task, adapter, projector, train_config)
        tvs.append(task_vectors(res.adapted, init))
        losses.append(res.final_loss)
        accs.append(res.eval_acc)
    ia, aa, bb = similarity_matrices(tvs)
    ww = None
    if full_ft_config is not None:
        names = model.config.target_names()
        ww = cosine_matrix([full_ft_delta(model, t, full_ft_config, names) for t in tasks])
    return SimilarityReport(task_ids=[t.task_id for t in tasks], task_init_a=ia,
                            task_task_a=aa, task_task_b=bb, final_losses=losses,
                            eval_accs=accs, task_task_w=ww)


def task_family(base_task, n_tasks):
    """``n_tasks`` tasks sharing the input distribution of ``base_task``, new labels each."""
    return [replace(base_task, task_id=f"{base_task.task_id}-{j}") for j in range(n_tasks)]


# -- sweeps ---------------------------------------------------------------------


def seed_band(*groups):
    """Largest ``max - min`` spread among groups of per-seed values."""
    return float(max(np.ptp(np.asarray(g, dtype=float)) for g in groups))


@dataclass
class SweepPoint:
    setting: object
    seeds: list
    metrics: dict  # metric -> per-seed values

    def mean(self, metric):
        return float(np.mean(self.metrics[metric]))

    def spread(self, metric):
        v = np.asarray(self.metrics[metric], dtype=float)
        return float(v.min()), float(v.max())


@dataclass
class SweepReport:
    axis: str
    variant: str
    points: list = field(default_factory=list)

    def complete(self, seeds):
        return (len(self.points) >= 2
                and all(p.seeds == list(seeds) for p in self.points)
                and all(len(p.metrics[m]) == len(seeds) for p in self.points for m in METRICS))

    def to_csv(self):
        lines = [f"axis,setting,seed,{','.join(METRICS)}"]
        for p in self.points:
            for i, s in enumerate(p.seeds):
                vals = ",".join(_fmt(p.metrics[m][i]) for m in METRICS)
                lines.append(f"{self.axis},{p.setting},{s},{vals}")
        return "\n".join(lines) + "\n"

    def summary(self):
        lines = [f"sweep over {self.axis} ({self.variant})"]
        for p in self.points:
            parts = []
            for m in METRICS:
                lo, hi = p.spread(m)
                parts.append(f"{m} {p.mean(m):.4f} [{lo:.4f}, {hi:.4f}]")
            lines.append(f"  {p.setting!s:>8}: " + "  ".join(parts))
        return "\n".join(lines) + "\n"


def _apply_setting(axis, setting, adapter, projector):
    if axis == "hidden_dim":
        return replace(adapter, rank=int(setting)), projector
    if axis == "pretrain_fraction":
        return adapter, replace(projector, fraction=float(setting))
    if axis == "algorithm":
        return adapter, replace(projector, algorithm=str(setting))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def run_sweep(axis, settings, model, task, adapter, projector, train_config, seeds):
    """Full pipeline for every ``(setting, seed)``.

    Seeds replicate the whole run (see :func:`ipakit.pipeline.with_seed`).
    For IPA the projector reconstruction error is measured on the features
    of the complete training split, so settings are compared on one set.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if len(settings) < 2 or len(seeds) < 3:
        raise ValueError("a sweep needs at least 2 settings and 3 seeds")
    report = SweepReport(axis=axis, variant=adapter.variant)
    for setting in settings:
        ad_s, pr_s = _apply_setting(axis, setting, adapter, projector)
        metrics = {m: [] for m in METRICS}
        for seed in seeds:
            t, a, p, c = with_seed(task, ad_s, pr_s, train_config, seed)
            full = collect_features(model, t, 1.0, p.seed) if a.variant == "ipa" else None
            try:
                res = run_pipeline(model, t, a, p, c, recon_features=full)
            except Exception as exc:
                raise RuntimeError(f"sweep run failed at {axis}={setting!r}, seed={seed}: "
                                   f"{exc}") from exc
            for m, v in res.metrics().items():
                metrics[m].append(v)
        report.points.append(SweepPoint(setting=setting, seeds=list(seeds), metrics=metrics))
    return report


def non_increasing_within_band(report, metric="recon_error"):
    """True when each point's mean exceeds the previous one by at most the seed band."""
    pts = report.points
    for prev, cur in zip(pts, pts[1:]):
        band = seed_band(prev.metrics[metric], cur.metrics[metric])
        if cur.mean(metric) > prev.mean(metric) + band:
            return False
    return True


# -- fixed-projector comparison --------------------------------------------------


@dataclass
class FixedProjReport:
    """Per-cell, per-seed outcomes keyed ``(variant, "frozen"|"trainable", rank)``."""

    seeds: list
    rank: int
    control_rank: int
    cells: dict = field(default_factory=dict)

    def values(self, variant, mode, rank, metric="eval_acc"):
        return [r[metric] for r in self.cells[(variant, mode, rank)]]

    def mean(self, variant, mode, rank, metric="eval_acc"):
        return float(np.mean(self.values(variant, mode, rank, metric)))

    def gap(self, rank, metric="eval_acc", a=("ipa", "frozen"), b=("lora", "frozen")):
        """``mean(a) - mean(b)`` and the seed band of the two cells."""
        va, vb = self.values(*a, rank, metric), self.values(*b, rank, metric)
        return float(np.mean(va) - np.mean(vb)), seed_band(va, vb)

    def to_csv(self):
        lines = ["variant,mode,rank,seed,eval_acc,final_loss"]
        for (variant, mode, rank), runs in self.cells.items():
            for seed, r in zip(self.seeds, runs):
                lines.append(f"{variant},{mode},{rank},{seed},{_fmt(r['eval_acc'])},"
                             f"{_fmt(r['final_loss'])}")
        return "\n".join(lines) + "\n"

    def summary(self):
        lines = []
        for (variant, mode, rank), runs in self.cells.items():
            acc = [r["eval_acc"] for r in runs]
            loss = [r["final_loss"] for r in runs]
            lines.append(f"{variant:>4} {mode:>9} rank {rank:>3}: acc {np.mean(acc):.4f} "
                         f"[{min(acc):.4f}, {max(acc):.4f}]  loss {np.mean(loss):.4f}")
        for rank in (self.rank, self.control_rank):
            g, band = self.gap(rank)
            lines.append(f"ipa-frozen minus lora-frozen at rank {rank}: {g:+.4f} (band {band:.4f})")
        return "\n".join(lines) + "\n"


def cell_key(variant, mode, rank):
    return f"{variant}/{mode}/{rank}"


def compare_fixed_projector(model, task, seeds, rank, adapters, projector, train_configs,
                            control_rank=None, modes=("frozen", "trainable"), cell_lr=None):
    """Train {lora, ipa} x {down-projection frozen, trainable} per seed.

    ``adapters`` maps variant to :class:`AdapterSettings` (scale) and
    ``train_configs`` maps variant to :class:`TrainConfig` (learning rate).
    ``cell_lr`` optionally overrides the base learning rate per cell, keyed
    ``"variant/mode/rank"`` (see :func:`cell_key`). ``control_rank``
    (default ``task.intrinsic_dim``) repeats the frozen cells where the
    projection loses nothing.
    """
    cell_lr = cell_lr or {}
    if rank >= task.intrinsic_dim:
        raise ValueError("the comparison needs intrinsic_dim > rank")
    control_rank = control_rank or task.intrinsic_dim
    report = FixedProjReport(seeds=list(seeds), rank=rank, control_rank=control_rank)
    plan = [(v, m, rank) for v in ("lora", "ipa") for m in modes]
    plan += [(v, "frozen", control_rank) for v in ("lora", "ipa")]
    for variant, mode, r in plan:
        runs = []
        for seed in seeds:
            base = replace(adapters[variant], variant=variant, rank=r,
                           proj_ft=(mode == "trainable"))
            tc = train_configs[variant]
            if cell_key(variant, mode, r) in cell_lr:
                tc = replace(tc, base_lr=float(cell_lr[cell_key(variant, mode, r)]))
            t, a, p, c = with_seed(task, base, projector, tc, seed)
            res = run_pipeline(model, t, a, p, c)
            runs.append({"eval_acc": res.eval_acc, "final_loss": res.final_loss})
        report.cells[(variant, mode, r)] = runs
    return report


def lr_grid_search(model, task, variant, grid, seeds, adapter, projector, train_config):
    """Mean eval accuracy per base learning rate (the coarse per-variant sweep)."""
    out = {}
    for lr in grid:
        accs = []
        for seed in seeds:
            t, a, p, c = with_seed(task, replace(adapter, variant=variant), projector,
                                   replace(train_config, base_lr=float(lr)), seed)
            accs.append(run_pipeline(model, t, a, p, c).eval_acc)
        out[float(lr)] = float(np.mean(accs))
    return out


__all__ = [
    "AdapterSettings", "FixedProjReport", "ProjectorSettings", "SimilarityReport",
    "SweepPoint", "SweepReport", "TaskVectors", "TrainConfig", "asymmetry_study",
    "cell_key", "compare_fixed_projector", "cosine_matrix", "full_ft_delta", "lr_grid_search",
    "matrix_csv", "non_increasing_within_band", "off_diagonal", "run_sweep", "seed_band",
    "similarity_matrices", "task_family", "task_vectors",
]
