from dataclasses import asdict, dataclass

TARGET_SETS = {
    # "language" convention: attention q/k/v plus both MLP projections
    "qkv_mlp": ("w_q", "w_k", "w_v", "w_up", "w_down"),
    # "vision" convention: query and value only
    "qv": ("w_q", "w_v"),
}


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    seq_len: int = 16
    n_classes: int = 4
    target_set: str = "qkv_mlp"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "d_model", "n_layers", "n_heads", "d_ff", "seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.target_set not in TARGET_SETS:
            raise ValueError(f"unknown target_set {self.target_set!r}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def target_names(self):
        """Names of the adapted weights, layer by layer."""
        return [f"layer{i}.{w}" for i in range(self.n_layers) for w in TARGET_SETS[self.target_set]]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TaskSpec:
    """Seeded synthetic classification task over token sequences.

    Inputs draw ``seq_len`` i.i.d. tokens from ``intrinsic_dim`` active
    vocabulary entries with geometrically decaying frequencies
    (``spectrum ** i``); the active set and the samples depend on ``seed``
    only, so tasks sharing a seed share their inputs. Labels come from a
    random two-layer teacher on the centered token histogram, seeded by
    ``(seed, task_id)``.
    """

    task_id: str = "task0"
    seed: int = 0
    intrinsic_dim: int = 12
    spectrum: float = 0.8
    n_train: int = 512
    n_eval: int = 256
    teacher_hidden: int = 32

    def __post_init__(self):
        if self.intrinsic_dim < 1:
            raise ValueError("intrinsic_dim must be at least 1")
        if not 0.0 < self.spectrum <= 1.0:
            raise ValueError("spectrum must lie in (0, 1]")
        if self.n_train < 1 or self.n_eval < 0:
            raise ValueError("n_train must be positive and n_eval non-negative")

    def to_dict(self):
        return asdict(self)
