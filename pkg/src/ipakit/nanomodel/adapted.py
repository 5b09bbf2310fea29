from dataclasses import dataclass, field

import numpy as np

from ..adapters import init_dora, init_ipa, init_lora, n_trainable, set_param
from ..errors import BindingError, ShapeError
from ..featureset import FeatureSet
from ..matcore import derive_seed, make_rng
from . import transformer as tf
from .tasks import make_dataset


@dataclass
class AdaptedModel:
    model: tf.TinyTransformer
    adapters: dict
    variant: str
    proj_trainable: bool
    adam_state: object = field(default=None, repr=False)
    seeds: dict = field(default_factory=dict)

    def forward(self, tokens):
        return tf.forward(self.model, tokens, self.adapters)[0]

    def flat_params(self):
        """Trainable parameters keyed ``"<weight>/<param>"``."""
        return {
            f"{name}/{p}": ad.params()[p]
            for name, ad in self.adapters.items()
            for p in ad.trainable()
        }

    def load_flat(self, flat):
        for key, value in flat.items():
            name, p = key.split("/")
            set_param(self.adapters[name], p, value)

    def n_trainable(self):
        return sum(n_trainable(ad) for ad in self.adapters.values())


def attach_adapters(model, variant, rank, alpha, projectors=None, proj_trainable=None, seed=0):
    """Put one adapter on every target weight of ``model``.

    ``rank`` is ``r`` for LoRA/DoRA and ``d_h`` for IPA (where it must match
    the projectors). LoRA/DoRA draw ``A`` from a per-weight seed derived
    from ``seed``, so runs sharing ``seed`` share ``A_0``. ``proj_trainable``
    defaults to True for LoRA/DoRA and False for IPA.
    """
    if proj_trainable is None:
        proj_trainable = variant != "ipa"
    adapters = {}
    for name in model.config.target_names():
        w = model.linears[name]
        if variant == "lora":
            adapters[name] = init_lora(w, rank, alpha, make_rng(derive_seed("A0", seed, name)),
                                       proj_trainable)
        elif variant == "dora":
            adapters[name] = init_dora(w, rank, alpha, make_rng(derive_seed("A0", seed, name)),
                                       proj_trainable)
        elif variant == "ipa":
            if not projectors or name not in projectors:
                raise BindingError(f"IPA needs a projector for {name}")
            proj = projectors[name]
            if proj.model_hash and proj.model_hash != model.model_hash:
                raise BindingError(f"projector for {name} was fitted on a different model")
            if proj.d_h != rank:
                raise ShapeError(f"projector for {name} has d_h={proj.d_h}, expected {rank}")
            adapters[name] = init_ipa(w, proj, alpha, proj_trainable)
        else:
            raise ValueError(f"unknown adapter variant {variant!r}")
    return AdaptedModel(model=model, adapters=adapters, variant=variant,
                        proj_trainable=proj_trainable)


def model_forward_backward(adapted, batch):
    """Mean cross-entropy on ``batch = (tokens, labels)`` and per-adapter gradients."""
    tokens, labels = batch
    if len(tokens) == 0:
        raise ValueError("empty batch")
    loss, _, ag = tf.loss_and_grads(adapted.model, tokens, labels, adapted.adapters)
    return loss, ag


def select_examples(n_train, fraction, seed):
    """Seeded subset: the first ``floor(fraction * n_train)`` examples of a shuffle."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n_sel = int(np.floor(fraction * n_train + 1e-9))
    if n_sel < 1:
        raise ValueError(f"fraction={fraction} selects no example out of {n_train}")
    return make_rng(derive_seed("feature-subset", seed)).permutation(n_train)[:n_sel]


def collect_features(model, task, fraction=0.1, seed=0, names=None, chunk=64):
    """Capture the input rows of every target linear map over a training subset.

    Returns a dict ``weight_name -> FeatureSet`` with one row per token,
    ordered by selected example and then by position.
    """
    cfg = model.config
    names = list(names) if names is not None else cfg.target_names()
    data = make_dataset(task, cfg.vocab, cfg.seq_len, cfg.n_classes)
    idx = select_examples(data.train_x.shape[0], fraction, seed)
    tokens = data.train_x[idx]
    rows = {name: [] for name in names}
    for start in range(0, len(tokens), chunk):
        _, st = tf.forward(model, tokens[start : start + chunk], capture=names)
        for name in names:
            rows[name].append(st.captured[name])
    return {
        name: FeatureSet(
            data=np.concatenate(rows[name], axis=0),
            weight_name=name,
            layer_id=int(name.split(".")[0][len("layer"):]),
            model_hash=model.model_hash,
        )
        for name in names
    }


def evaluate(adapted, task, split="eval"):
    cfg = adapted.model.config
    data = make_dataset(task, cfg.vocab, cfg.seq_len, cfg.n_classes)
    x, y = (data.eval_x, data.eval_y) if split == "eval" else (data.train_x, data.train_y)
    return tf.accuracy(adapted.model, x, y, adapted.adapters)
