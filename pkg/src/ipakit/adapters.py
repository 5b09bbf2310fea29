"""Low-rank adapters on frozen linear maps: LoRA, IPA and DoRA.

All three act on row-batched inputs ``x`` of shape ``(n, d_in)`` (a single
``(d_in,)`` vector works too) and follow the ``z = W x`` convention with
``W`` of shape ``(d_out, d_in)``:

* LoRA  ``z = W x + lam * B (A x)``,      ``lam = alpha / r``
* IPA   ``z = W x + lam * B (U x)``,      ``lam = alpha / d_h``, ``U`` a
  pretrained projector (trainable only on request)
* DoRA  ``z = (m / ||V||_col) * V x`` with ``V = W + lam * B A``; ``m`` holds
  one magnitude per input column of ``W``.

``B`` starts at zero for every variant, so a fresh adapter reproduces the
frozen layer. Gradients are exact (DoRA differentiates through the column
norms) and are summed over the rows of a batch.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .matcore import as_matrix
from .projector import Projector

VARIANTS = ("lora", "ipa", "dora")


class FrozenLinear:
    """A pretrained weight matrix that cannot be written to."""

    def __init__(self, w):
        w = np.array(as_matrix(w, "w"), dtype=np.float64, copy=True)
        w.setflags(write=False)
        self._w = w

    @property
    def w(self):
        return self._w

    @property
    def d_out(self):
        return self._w.shape[0]

    @property
    def d_in(self):
        return self._w.shape[1]

    def __call__(self, x):
        return np.asarray(x) @ self._w.T

    def __repr__(self):
        return f"FrozenLinear({self.d_out}x{self.d_in})"


@dataclass
class AdapterCache:
    x: np.ndarray
    xh: np.ndarray = None
    v: np.ndarray = None
    norms: np.ndarray = None
    w_eff: np.ndarray = None


def _as_rows(x, d_in):
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    if rows.ndim != 2 or rows.shape[1] != d_in:
        raise ShapeError(f"input of shape {x.shape} does not match d_in={d_in}")
    return rows


def _restore(out, x):
    return out.reshape(-1) if np.ndim(x) == 1 else out


def _check_dz(dz, cache, d_out):
    if cache is None:
        raise ValueError("backward needs the cache returned by forward")
    rows = np.asarray(dz, dtype=np.float64)
    rows = rows.reshape(1, -1) if rows.ndim == 1 else rows
    if rows.shape != (cache.x.shape[0], d_out):
        raise ShapeError(f"dz of shape {np.shape(dz)} does not match the forward pass")
    return rows


@dataclass
class _LowRank:
    """Shared forward/backward for ``z = W x + lam * B (D x)``."""

    b: np.ndarray
    alpha: float
    proj_trainable: bool = True

    @property
    def rank(self):
        return self.b.shape[1]

    @property
    def scale(self):
        return self.alpha / self.rank

    def _down(self):
        raise NotImplementedError

    def delta(self, x):
        """The adapter branch ``lam * B (D x)`` alone."""
        rows = _as_rows(x, self._down().shape[1])
        return _restore(self.scale * ((rows @ self._down().T) @ self.b.T), x)

    def forward(self, w, x):
        rows = _as_rows(x, w.d_in)
        xh = rows @ self._down().T
        z = w(rows) + self.scale * (xh @ self.b.T)
        return _restore(z, x), AdapterCache(x=rows, xh=xh)

    def _vjp(self, w, cache, dz):
        dz = _check_dz(dz, cache, w.d_out)
        lam = self.scale
        gh = dz @ self.b
        grads = {"b": lam * (dz.T @ cache.xh)}
        if self.proj_trainable:
            grads[self._down_name] = lam * (gh.T @ cache.x)
        dx = dz @ w.w + lam * (gh @ self._down())
        return grads, dx

    def merge(self, w):
        if not self.b.any():
            return w.w.copy()
        return w.w + self.scale * (self.b @ self._down())


@dataclass
class LoraAdapter(_LowRank):
    a: np.ndarray = None
    variant: str = field(default="lora", init=False)
    _down_name = "a"

    def _down(self):
        return self.a

    def params(self):
        return {"a": self.a, "b": self.b}

    def trainable(self):
        return ("a", "b") if self.proj_trainable else ("b",)


@dataclass
class IpaAdapter(_LowRank):
    proj: Projector = None
    variant: str = field(default="ipa", init=False)
    _down_name = "u"

    def _down(self):
        return self.proj.u

    def params(self):
        return {"u": self.proj.u, "b": self.b}

    def trainable(self):
        return ("u", "b") if self.proj_trainable else ("b",)


@dataclass
class DoraAdapter:
    m: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: float
    proj_trainable: bool = True
    variant: str = field(default="dora", init=False)

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def scale(self):
        return self.alpha / self.rank

    def params(self):
        return {"m": self.m, "a": self.a, "b": self.b}

    def trainable(self):
        return ("m", "a", "b") if self.proj_trainable else ("m", "b")

    def _direction(self, w):
        v = w.w if not self.b.any() else w.w + self.scale * (self.b @ self.a)
        norms = np.sqrt(np.sum(v * v, axis=0))
        if np.any(norms == 0.0):
            raise NonFiniteError("DoRA direction matrix has a zero column")
        return v, norms

    def merge(self, w):
        v, norms = self._direction(w)
        return v * (self.m / norms)[None, :]

    def delta(self, x):
        raise NotImplementedError("DoRA is not additive; use forward")

    def forward(self, w, x):
        rows = _as_rows(x, w.d_in)
        v, norms = self._direction(w)
        w_eff = v * (self.m / norms)[None, :]
        z = rows @ w_eff.T
        return _restore(z, x), AdapterCache(x=rows, v=v, norms=norms, w_eff=w_eff)

    def _vjp(self, w, cache, dz):
        dz = _check_dz(dz, cache, w.d_out)
        v, norms = cache.v, cache.norms
        g = dz.T @ cache.x
        gv = np.sum(g * v, axis=0)
        grads = {"m": gv / norms}
        dv = g * (self.m / norms)[None, :] - v * (self.m * gv / norms**3)[None, :]
        lam = self.scale
        grads["b"] = lam * (dv @ self.a.T)
        if self.proj_trainable:
            grads["a"] = lam * (self.b.T @ dv)
        dx = dz @ cache.w_eff
        return grads, dx


def _check_rank(w, r):
    if r < 1 or r > min(w.d_in, w.d_out):
        raise ShapeError(f"rank {r} not in [1, min(d_in, d_out)={min(w.d_in, w.d_out)}]")


def _check_alpha(alpha):
    if not alpha > 0:
        raise ValueError("alpha must be positive")


def init_lora(w, r, alpha, rng, proj_trainable=True):
    """LoRA with ``A ~ N(0, 1/d_in)`` and ``B = 0``."""
    _check_rank(w, r)
    _check_alpha(alpha)
    a = rng.standard_normal((r, w.d_in)) / np.sqrt(w.d_in)
    return LoraAdapter(b=np.zeros((w.d_out, r)), alpha=float(alpha),
                       proj_trainable=proj_trainable, a=a)


def init_ipa(w, proj, alpha, proj_trainable=False):
    """IPA adapter around a pretrained projector; ``lam = alpha / d_h``."""
    if proj.d_in != w.d_in:
        raise ShapeError(f"projector d_in={proj.d_in} does not match layer d_in={w.d_in}")
    _check_alpha(alpha)
    own = Projector(u=proj.u.copy(), algorithm=proj.algorithm, centered=proj.centered,
                    mean=proj.mean.copy(), seen=proj.seen, fine_tuned=proj.fine_tuned,
                    model_hash=proj.model_hash, weight_name=proj.weight_name,
                    stats=dict(proj.stats))
    return IpaAdapter(b=np.zeros((w.d_out, proj.d_h)), alpha=float(alpha),
                      proj_trainable=proj_trainable, proj=own)


def init_dora(w, r, alpha, rng, proj_trainable=True):
    """DoRA with ``m`` = column norms of ``W``, Gaussian ``A`` and ``B = 0``."""
    _check_rank(w, r)
    _check_alpha(alpha)
    m = np.sqrt(np.sum(w.w * w.w, axis=0))
    if np.any(m == 0.0):
        raise ShapeError("DoRA needs every column of W to be nonzero")
    a = rng.standard_normal((r, w.d_in)) / np.sqrt(w.d_in)
    return DoraAdapter(m=m, a=a, b=np.zeros((w.d_out, r)), alpha=float(alpha),
                       proj_trainable=proj_trainable)


def forward(ad, w, x):
    """Adapted layer output and the cache needed by :func:`backward`."""
    return ad.forward(w, x)


def vjp(ad, w, cache, dz):
    """Parameter gradients (as a dict) and the gradient w.r.t. the input rows."""
    grads, dx = ad._vjp(w, cache, dz)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name} is not finite")
    return grads, dx


def backward(ad, w, cache, dz):
    """Gradients of the trainable parameters, summed over the batch rows."""
    return vjp(ad, w, cache, dz)[0]


def merge(ad, w):
    """Materialise the adapted weight so inference needs no extra branch."""
    return ad.merge(w)


def n_trainable(ad):
    p = ad.params()
    return int(sum(p[name].size for name in ad.trainable()))


def set_param(ad, name, value):
    """Write back an updated parameter array (used by the optimizer)."""
    if name == "u":
        ad.proj.u = value
        ad.proj.fine_tuned = True
    elif name in ad.params():
        setattr(ad, name, value)
    else:
        raise KeyError(f"{ad.variant} adapter has no parameter {name!r}")
