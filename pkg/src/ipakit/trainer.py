"""Adam with linear warm-up then linear decay, and the adapter training loop."""

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .matcore import derive_seed, make_rng


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")

    def to_dict(self):
        return asdict(self)


def lr_at(config, t):
    """Learning rate at step ``t``: linear ramp to ``base_lr``, then linear decay to 0."""
    if t < 0 or t > config.steps:
        raise ValueError(f"step {t} outside [0, {config.steps}]")
    if t < config.warmup_steps:
        return config.base_lr * (t + 1) / config.warmup_steps
    if config.steps == config.warmup_steps:
        return 0.0
    return max(config.base_lr * (config.steps - t) / (config.steps - config.warmup_steps), 0.0)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of the entries of ``params`` named in ``grads``.

    Moments are keyed by parameter name, so parameters never share state.
    Returns new ``(params, state)``; the inputs are left untouched.
    """
    t = state.t + 1
    new_params = dict(params)
    new_m = dict(state.m)
    new_v = dict(state.v)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for key, g in grads.items():
        p = params[key]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        m = new_m.get(key, np.zeros_like(p))
        v = new_v.get(key, np.zeros_like(p))
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {key} does not match the parameter")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        updated = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(updated)):
            raise DivergenceError(f"non-finite Adam update for {key}", step=t)
        new_params[key], new_m[key], new_v[key] = updated, m, v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, lr, loss):
        self.steps.append(int(step))
        self.lrs.append(float(lr))
        self.losses.append(float(loss))

    def to_csv(self):
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in zip(self.steps, self.lrs, self.losses)]
        return "\n".join(lines) + "\n"


def batch_indices(n, config):
    """Deterministic mini-batch index arrays: reshuffle each pass over the data."""
    rng = make_rng(derive_seed("batches", config.seed))
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    out = []
    for _ in range(config.steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        out.append(order[pos : pos + bs])
        pos += bs
    return out


def run_adam(params, grad_fn, config, n_train, state=None):
    """Generic loop: ``grad_fn(params, idx) -> (loss, grads)`` for each batch.

    Only the keys present in ``grads`` are updated.
    """
    state = state or AdamState()
    log = TrainLog()
    for step, idx in enumerate(batch_indices(n_train, config)):
        try:
            loss, grads = grad_fn(params, idx)
        except DivergenceError as exc:
            if exc.step is not None:
                raise
            raise DivergenceError(f"{exc} at step {step}", step=step) from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}", step=step)
        lr = lr_at(config, step)
        log.append(step, lr, loss)
        params, state = adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
    return params, log, state


def train(adapted, task, config):
    """Train the adapters of ``adapted`` on ``task``; returns ``(adapted', log)``.

    The input model is not modified. Only trainable adapter parameters are
    updated; host weights are read-only throughout.
    """
    from .adapters import set_param
    from .nanomodel.adapted import model_forward_backward
    from .nanomodel.tasks import make_dataset

    out = copy.deepcopy(adapted)
    cfg = out.model.config
    data = make_dataset(task, cfg.vocab, cfg.seq_len, cfg.n_classes)
    params = out.flat_params()

    def grad_fn(current, idx):
        out.load_flat(current)
        loss, grads = model_forward_backward(out, (data.train_x[idx], data.train_y[idx]))
        flat = {f"{name}/{p}": g for name, gd in grads.items() for p, g in gd.items()}
        return loss, flat

    try:
        params, log, state = run_adam(params, grad_fn, config, data.train_x.shape[0])
    except DivergenceError as exc:
        raise DivergenceError(f"training aborted: {exc}", step=exc.step) from exc
    out.load_flat(params)
    out.adam_state = state
    return out, log
