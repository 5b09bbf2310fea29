"""A tiny pre-norm transformer classifier with hand-written backprop.

Per layer::

    h   = x + W_o . Attn(LN1(x))          (bidirectional softmax attention)
    out = h + W_down . GELU(W_up . LN2(h))

followed by mean pooling over the sequence and a linear head. There are no
biases in the linear maps and no positional embedding, so the host is a
function of the multiset of input tokens.
"""

import hashlib

import numpy as np
from scipy.special import erf

from ..adapters import FrozenLinear, vjp
from ..errors import DivergenceError
from ..matcore import derive_seed, make_rng
from .config import ModelConfig

LN_EPS = 1e-5
LINEARS = ("w_q", "w_k", "w_v", "w_o", "w_up", "w_down")
_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def param_shapes(cfg):
    """Canonical (name, shape) list; this order defines the model payload."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("embed", (cfg.vocab, d))]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "w_q", (d, d)), (p + "w_k", (d, d)), (p + "w_v", (d, d)), (p + "w_o", (d, d)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w_up", (f, d)), (p + "w_down", (d, f)),
        ]
    shapes.append(("head", (cfg.n_classes, d)))
    return shapes


def init_params(cfg):
    rng = make_rng(derive_seed("host-init", cfg.seed))
    params = {}
    for name, shape in param_shapes(cfg):
        if name == "embed":
            params[name] = rng.standard_normal(shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
    return params


class TinyTransformer:
    """Frozen host network. All parameters are read-only arrays."""

    def __init__(self, config, params):
        self.config = config
        self.linears = {}
        self.vectors = {}
        for name, shape in param_shapes(config):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            if name.rsplit(".", 1)[-1] in LINEARS:
                self.linears[name] = FrozenLinear(arr)
            else:
                arr = arr.copy()
                arr.setflags(write=False)
                self.vectors[name] = arr
        self.pretrain_log = None
        self.seeds = {}
        self._hash = None

    def param(self, name):
        if name in self.linears:
            return self.linears[name].w
        return self.vectors[name]

    def params(self):
        return {name: self.param(name) for name, _ in param_shapes(self.config)}

    def payload_bytes(self):
        return b"".join(
            np.ascontiguousarray(self.param(name), dtype="<f8").tobytes()
            for name, _ in param_shapes(self.config)
        )

    @property
    def model_hash(self):
        """SHA-256 of the little-endian parameter payload."""
        if self._hash is None:
            self._hash = hashlib.sha256(self.payload_bytes()).hexdigest()
        return self._hash

    def with_weights(self, replacements):
        """Copy of the model with some linear weights replaced (e.g. merged)."""
        params = self.params()
        params.update(replacements)
        return TinyTransformer(self.config, params)


# -- building blocks ----------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=axes)
    db = np.sum(dy, axis=axes)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dg, db


def gelu(u):
    return 0.5 * u * (1.0 + erf(u * _SQRT_HALF))


def gelu_grad(u):
    return 0.5 * (1.0 + erf(u * _SQRT_HALF)) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def layer_norm(x, g, b):
    return _ln_forward(np.asarray(x, dtype=np.float64), g, b)[0]


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


# -- forward / backward -------------------------------------------------------


class _Pass:
    """Bookkeeping for one forward pass (caches, captures)."""

    def __init__(self, model, adapters, capture):
        self.model = model
        self.adapters = adapters or {}
        self.capture = capture
        self.lin_cache = {}
        self.captured = {}
        self.pre_adapter = {}

    def linear(self, name, rows):
        w = self.model.linears[name]
        if self.capture is not None and name in self.capture:
            self.captured[name] = rows.copy()
            self.pre_adapter[name] = w(rows)
        ad = self.adapters.get(name)
        if ad is None:
            self.lin_cache[name] = rows
            return w(rows)
        z, cache = ad.forward(w, rows)
        self.lin_cache[name] = cache
        return z


def forward(model, tokens, adapters=None, capture=None):
    """Logits for a batch of token sequences.

    Parameters
    ----------
    tokens : (B, T) int array
    adapters : dict, optional
        Maps linear weight names (``"layer0.w_q"``) to adapters.
    capture : iterable of str, optional
        Weight names whose input rows (and pre-adapter outputs) are recorded.

    Returns
    -------
    logits : (B, n_classes) array
    state : opaque cache for :func:`backward`; ``state.captured`` holds the
        recorded inputs in (example, token) row order.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (batch, seq) array")
    bsz, t = tokens.shape
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    st = _Pass(model, adapters, set(capture) if capture is not None else None)
    st.tokens = tokens
    st.layers = []
    x = model.vectors["embed"][tokens]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        lc = {}
        a, lc["ln1"] = _ln_forward(x, model.vectors[p + "ln1.g"], model.vectors[p + "ln1.b"])
        a2 = a.reshape(bsz * t, d)
        q = st.linear(p + "w_q", a2).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        k = st.linear(p + "w_k", a2).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        v = st.linear(p + "w_v", a2).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        o = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz * t, d)
        lc.update(q=q, k=k, v=v, probs=probs)
        h = x + st.linear(p + "w_o", o).reshape(bsz, t, d)
        c, lc["ln2"] = _ln_forward(h, model.vectors[p + "ln2.g"], model.vectors[p + "ln2.b"])
        u = st.linear(p + "w_up", c.reshape(bsz * t, d))
        lc["u"] = u
        x = h + st.linear(p + "w_down", gelu(u)).reshape(bsz, t, d)
        st.layers.append(lc)
    pooled = x.mean(axis=1)
    st.pooled = pooled
    return pooled @ model.vectors["head"].T, st


def backward(model, st, dlogits, weight_grads=False):
    """Backpropagate ``dlogits`` through a cached forward pass.

    Returns ``(param_grads, adapter_grads)``. ``param_grads`` is filled only
    when ``weight_grads`` is true (full fine-tuning); ``adapter_grads`` maps
    each adapted weight name to its gradient dict.
    """
    cfg = model.config
    bsz, t = st.tokens.shape
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    pg = {}
    ag = {}

    def lin_back(name, dz):
        w = model.linears[name]
        ad = st.adapters.get(name)
        cache = st.lin_cache[name]
        if ad is None:
            if weight_grads:
                pg[name] = dz.T @ cache
            return dz @ w.w
        grads, dx = vjp(ad, w, cache, dz)
        ag[name] = grads
        return dx

    head = model.vectors["head"]
    if weight_grads:
        pg["head"] = dlogits.T @ st.pooled
    dx = np.broadcast_to((dlogits @ head)[:, None, :] / t, (bsz, t, d)).copy()
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        lc = st.layers[i]
        dgu = lin_back(p + "w_down", dx.reshape(bsz * t, d))
        du = dgu * gelu_grad(lc["u"])
        dc = lin_back(p + "w_up", du)
        dh_ln, dg2, db2 = _ln_backward(dc.reshape(bsz, t, d), model.vectors[p + "ln2.g"], lc["ln2"])
        dh = dx + dh_ln
        do = lin_back(p + "w_o", dh.reshape(bsz * t, d))
        do = do.reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        q, k, v, probs = lc["q"], lc["k"], lc["v"], lc["probs"]
        dprobs = do @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ do
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dscores /= np.sqrt(hd)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        def merge_heads(g):
            return g.transpose(0, 2, 1, 3).reshape(bsz * t, d)

        da = lin_back(p + "w_q", merge_heads(dq))
        da = da + lin_back(p + "w_k", merge_heads(dk))
        da = da + lin_back(p + "w_v", merge_heads(dv))
        dx_ln, dg1, db1 = _ln_backward(da.reshape(bsz, t, d), model.vectors[p + "ln1.g"], lc["ln1"])
        dx = dh + dx_ln
        if weight_grads:
            pg.update({p + "ln1.g": dg1, p + "ln1.b": db1, p + "ln2.g": dg2, p + "ln2.b": db2})
    if weight_grads:
        demb = np.zeros_like(model.vectors["embed"])
        np.add.at(demb, st.tokens.reshape(-1), dx.reshape(bsz * t, d))
        pg["embed"] = demb
    return pg, ag


def loss_and_grads(model, tokens, labels, adapters=None, weight_grads=False):
    logits, st = forward(model, tokens, adapters)
    loss, dlogits = cross_entropy(logits, np.asarray(labels))
    if not np.isfinite(loss):
        raise DivergenceError("loss is not finite")
    pg, ag = backward(model, st, dlogits, weight_grads=weight_grads)
    return loss, pg, ag


def predict(model, tokens, adapters=None, chunk=256):
    out = []
    for start in range(0, len(tokens), chunk):
        out.append(forward(model, tokens[start : start + chunk], adapters)[0])
    return np.concatenate(out, axis=0)


def accuracy(model, tokens, labels, adapters=None):
    if len(tokens) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(model, tokens, adapters), axis=1) == labels))


# -- pretraining ----------------------------------------------------------------


def pretext_task(cfg):
    """Default generic task used to pretrain the host: the whole vocabulary."""
    from .config import TaskSpec

    return TaskSpec(task_id="pretext", seed=cfg.seed, intrinsic_dim=cfg.vocab,
                    spectrum=0.95, n_train=1024, n_eval=256)


def pretrain_host(config=None, pretask=None, train=None):
    """Full fine-tuning of a freshly initialised host on a pretext task.

    Produces non-random, anisotropic hidden features; everything is seeded
    by ``config.seed``, ``pretask`` and ``train.seed``. The returned model is
    frozen and carries ``pretrain_log`` (per-step loss and learning rate).
    """
    from ..trainer import TrainConfig, run_adam
    from .tasks import make_dataset

    cfg = config or ModelConfig()
    pretask = pretask or pretext_task(cfg)
    train = train or TrainConfig(steps=300, batch_size=32, base_lr=3e-3, warmup_steps=30,
                                 seed=cfg.seed)
    data = make_dataset(pretask, cfg.vocab, cfg.seq_len, cfg.n_classes)
    params = init_params(cfg)

    def grad_fn(current, idx):
        model = TinyTransformer(cfg, current)
        loss, pg, _ = loss_and_grads(model, data.train_x[idx], data.train_y[idx],
                                     weight_grads=True)
        return loss, pg

    params, log, _ = run_adam(params, grad_fn, train, data.train_x.shape[0])
    model = TinyTransformer(cfg, params)
    model.pretrain_log = log
    model.seeds = {"host": cfg.seed, "pretext": pretask.seed, "train": train.seed}
    return model
