from dataclasses import dataclass

import numpy as np

from ..matcore import derive_seed, make_rng


@dataclass(frozen=True)
class Dataset:
    train_x: np.ndarray  # (n_train, seq_len) int64 token ids
    train_y: np.ndarray  # (n_train,) int64 labels
    eval_x: np.ndarray
    eval_y: np.ndarray


def token_distribution(task, vocab):
    """Active token ids and their sampling probabilities."""
    if task.intrinsic_dim > vocab:
        raise ValueError(f"intrinsic_dim={task.intrinsic_dim} exceeds vocab={vocab}")
    rng = make_rng(derive_seed("inputs", task.seed))
    active = rng.permutation(vocab)[: task.intrinsic_dim]
    probs = task.spectrum ** np.arange(task.intrinsic_dim, dtype=np.float64)
    return active, probs / probs.sum()


def make_dataset(task, vocab, seq_len, n_classes):
    active, probs = token_distribution(task, vocab)
    n = task.n_train + task.n_eval
    rng = make_rng(derive_seed("samples", task.seed))
    idx = rng.choice(task.intrinsic_dim, size=(n, seq_len), p=probs)
    tokens = active[idx].astype(np.int64)

    counts = np.zeros((n, task.intrinsic_dim))
    np.add.at(counts, (np.repeat(np.arange(n), seq_len), idx.reshape(-1)), 1.0)
    hist = (counts / seq_len - probs) * np.sqrt(seq_len)

    trng = make_rng(derive_seed("teacher", task.seed, task.task_id))
    w1 = trng.standard_normal((task.teacher_hidden, task.intrinsic_dim))
    w2 = trng.standard_normal((n_classes, task.teacher_hidden))
    scores = np.tanh(hist @ w1.T) @ w2.T
    # centre each class score on the training split so classes are roughly balanced
    scores -= scores[: task.n_train].mean(axis=0)
    labels = np.argmax(scores, axis=1).astype(np.int64)
    return Dataset(
        train_x=tokens[: task.n_train],
        train_y=labels[: task.n_train],
        eval_x=tokens[task.n_train :],
        eval_y=labels[task.n_train :],
    )
