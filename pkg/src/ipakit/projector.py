"""Forward-only pretraining of linear input projectors.

A projector is a ``d_h x d_in`` matrix ``U`` used as the encoder
``x_h = U x`` with the tied decoder ``x ~ U^T x_h``. The reconstruction
objective ``E ||x - U^T U x||^2`` is minimised by the top-``d_h``
eigenvectors of the (by default uncentered) second-moment matrix of the
collected features. Three estimators are provided:

* :func:`exact_pca` -- dense eigendecomposition, the reference oracle;
* incremental PCA (:func:`ipca_init` / :func:`ipca_update` /
  :func:`ipca_finalize`) -- sequential truncated-SVD updates over feature
  mini-batches;
* the generalized Hebbian algorithm (:func:`gha_init` /
  :func:`gha_epoch` / :func:`gha_finalize`) -- Sanger's online rule.

:func:`random_projector` gives the data-agnostic Gaussian baseline.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateRankError, DivergenceError, NonFiniteError, ShapeError
from .featureset import FeatureSet, feature_matrix
from .matcore import as_matrix, make_rng, orthonormal_rows, sym_eig_desc, thin_svd

ALGORITHMS = ("exact", "ipca", "gha", "random")

# singular values below this fraction of the largest are treated as zero
RANK_RTOL = 1e-12


@dataclass
class Projector:
    u: np.ndarray
    algorithm: str
    centered: bool = False
    mean: np.ndarray = None
    seen: int = 0
    fine_tuned: bool = False
    model_hash: str = ""
    weight_name: str = ""
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.array(as_matrix(self.u, "u"), dtype=np.float64)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown projector algorithm {self.algorithm!r}")
        if self.u.shape[0] > self.u.shape[1]:
            raise ShapeError(f"d_h={self.u.shape[0]} exceeds d_in={self.u.shape[1]}")
        if self.mean is None:
            self.mean = np.zeros(self.d_in)
        self.mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        if self.mean.shape[0] != self.d_in:
            raise ShapeError("projector mean has the wrong length")
        if not self.centered and np.any(self.mean != 0.0):
            raise ValueError("uncentered projectors must carry an all-zero mean")

    @property
    def d_h(self):
        return self.u.shape[0]

    @property
    def d_in(self):
        return self.u.shape[1]

    def encode(self, x):
        return (np.asarray(x) - self.mean) @ self.u.T

    def decode(self, xh):
        return np.asarray(xh) @ self.u + self.mean


def _check_dims(d_in, d_h):
    if d_h < 1:
        raise ShapeError(f"d_h must be at least 1, got {d_h}")
    if d_h > d_in:
        raise ShapeError(f"d_h={d_h} exceeds d_in={d_in}")


def _provenance(features):
    if isinstance(features, FeatureSet):
        return {"model_hash": features.model_hash, "weight_name": features.weight_name}
    return {}


def second_moment(x, centered=False):
    """``(1/N) X^T X`` of the (optionally mean-subtracted) rows of ``x``."""
    x = feature_matrix(x)
    mean = x.mean(axis=0) if centered else np.zeros(x.shape[1])
    xc = x - mean
    sigma = xc.T @ xc / x.shape[0]
    return 0.5 * (sigma + sigma.T), mean


def exact_pca(features, d_h, centered=False):
    """Projector onto the top-``d_h`` eigenvectors of the feature covariance."""
    x = feature_matrix(features)
    _check_dims(x.shape[1], d_h)
    if x.shape[0] < d_h:
        raise ShapeError(f"need at least d_h={d_h} samples, got {x.shape[0]}")
    sigma, mean = second_moment(x, centered)
    w, v = sym_eig_desc(sigma)
    return Projector(
        u=v[:, :d_h].T.copy(),
        algorithm="exact",
        centered=centered,
        mean=mean,
        seen=x.shape[0],
        stats={"eigenvalues": [float(e) for e in w]},
        **_provenance(features),
    )


# -- incremental PCA ----------------------------------------------------------


@dataclass
class IpcaState:
    components: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray
    seen: int
    rank_cap: int
    centered: bool
    oversample: int = 0

    @property
    def keep(self):
        """Number of components retained between updates."""
        return self.rank_cap + self.oversample

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def d_in(self):
        return self.components.shape[1]


def ipca_init(d_in, d_h, centered=False, oversample=None):
    """Empty IPCA state targeting ``d_h`` components.

    Between updates the state keeps ``oversample`` components beyond ``d_h``
    (default ``d_h``, never more than ``d_in - d_h``). Truncating straight to
    ``d_h`` after every batch discards directions permanently: a direction
    that ranks just below the cut early in the stream can no longer win it
    back from the accumulated energy of the retained ones. ``oversample=0``
    gives that strict variant.
    """
    _check_dims(d_in, d_h)
    if oversample is None:
        oversample = d_h
    if oversample < 0:
        raise ValueError("oversample must be non-negative")
    return IpcaState(
        components=np.zeros((0, d_in)),
        singular_values=np.zeros(0),
        mean=np.zeros(d_in),
        seen=0,
        rank_cap=d_h,
        centered=centered,
        oversample=min(int(oversample), d_in - d_h),
    )


def ipca_update(state, batch):
    """Fold one mini-batch into the running low-rank factorisation.

    The rows ``diag(s) @ components`` already summarise every sample seen so
    far (their Gram matrix equals the scatter matrix of those samples within
    the retained rank), so stacking the new rows beneath them and taking a
    thin SVD yields the factorisation of the enlarged set. In centered mode
    the batch is centered on its own mean and one extra row accounts for the
    shift between the old and the new mean. All samples are weighted
    equally.
    """
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != state.d_in:
        raise ShapeError(f"batch has {batch.shape[1]} columns, state expects {state.d_in}")
    n, m = state.seen, batch.shape[0]
    if state.centered:
        mu_b = batch.mean(axis=0)
        new_mean = (n * state.mean + m * mu_b) / (n + m)
        rows = [batch - mu_b]
        if n > 0:
            rows.append(np.sqrt(n * m / (n + m)) * (state.mean - mu_b)[None, :])
    else:
        new_mean = state.mean
        rows = [batch]
    stack = np.vstack([state.singular_values[:, None] * state.components] + rows)
    _, s, vt = thin_svd(stack)
    if s[0] > 0.0:
        k = min(state.keep, int(np.count_nonzero(s > RANK_RTOL * s[0])))
    else:
        k = 0
    return IpcaState(
        components=vt[:k].copy(),
        singular_values=s[:k].copy(),
        mean=new_mean,
        seen=n + m,
        rank_cap=state.rank_cap,
        centered=state.centered,
        oversample=state.oversample,
    )


def complete_rows(u, d_h):
    """Extend orthonormal rows ``u`` to ``d_h`` rows with a deterministic complement."""
    d_in = u.shape[1]
    resid = np.eye(d_in) - u.T @ u
    _, vecs = sym_eig_desc(0.5 * (resid + resid.T))
    return np.vstack([u, vecs[:, : d_h - u.shape[0]].T])


def ipca_finalize(state, complete_basis=False):
    """Turn an IPCA state into a Projector.

    If the stream had numerical rank below ``d_h`` a
    :class:`~ipakit.errors.DegenerateRankError` is raised, unless
    ``complete_basis`` is set; then the missing rows are filled with an
    orthonormal complement and the count is recorded in ``stats["padded_rows"]``.
    """
    d_h = state.rank_cap
    if state.seen < d_h:
        raise ShapeError(f"IPCA has seen {state.seen} samples, needs at least d_h={d_h}")
    stats = {"singular_values": [float(s) for s in state.singular_values[:d_h]]}
    u = state.components[:d_h]
    if state.k < d_h:
        if not complete_basis:
            raise DegenerateRankError(
                f"feature stream has numerical rank {state.k} < d_h={d_h}"
            )
        stats["padded_rows"] = d_h - state.k
        u = complete_rows(u, d_h)
    return Projector(
        u=u.copy(),
        algorithm="ipca",
        centered=state.centered,
        mean=state.mean.copy() if state.centered else None,
        seen=state.seen,
        stats=stats,
    )


def ipca_fit(features, d_h, batch_size, centered=False, complete_basis=False,
             oversample=None):
    """Stream ``features`` through IPCA in row order, ``batch_size`` rows at a time."""
    x = feature_matrix(features)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    state = ipca_init(x.shape[1], d_h, centered, oversample)
    for start in range(0, x.shape[0], batch_size):
        state = ipca_update(state, x[start : start + batch_size])
    proj = ipca_finalize(state, complete_basis=complete_basis)
    proj.stats["batch_size"] = int(batch_size)
    proj.stats["oversample"] = state.oversample
    return replace(proj, **_provenance(features))


# -- generalized Hebbian algorithm -------------------------------------------


@dataclass
class GhaState:
    u: np.ndarray
    learning_rate: float
    epochs_done: int = 0


def gha_init(d_in, d_h, learning_rate, rng):
    """Random Gaussian(0, 1/d_in) starting weights for Sanger's rule."""
    _check_dims(d_in, d_h)
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    u = rng.standard_normal((d_h, d_in)) / np.sqrt(d_in)
    return GhaState(u=u, learning_rate=float(learning_rate))


def gha_epoch(state, features, order):
    """One pass of Sanger's rule over ``features`` in the given row order.

    Per sample: ``y = U x`` then ``U += lr * (y x^T - tril(y y^T) U)``.
    """
    x = feature_matrix(features)
    u = np.array(state.u, dtype=np.float64)
    if x.shape[1] != u.shape[1]:
        raise ShapeError(f"features have {x.shape[1]} columns, projector expects {u.shape[1]}")
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(x.shape[0])):
        raise ValueError("order must be a permutation of the sample indices")
    lr = state.learning_rate
    if not lr > 0:
        raise ValueError("learning_rate must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        for i in order:
            xi = x[i]
            y = u @ xi
            u += lr * (np.outer(y, xi) - np.tril(np.outer(y, y)) @ u)
    if not np.all(np.isfinite(u)):
        raise DivergenceError(
            f"GHA diverged in epoch {state.epochs_done + 1}; lower the learning rate"
        )
    return GhaState(u=u, learning_rate=lr, epochs_done=state.epochs_done + 1)


def gha_finalize(state):
    if state.epochs_done < 1:
        raise ValueError("GHA state has not been trained for any epoch")
    return Projector(
        u=state.u.copy(),
        algorithm="gha",
        centered=False,
        stats={"epochs": state.epochs_done, "learning_rate": state.learning_rate},
    )


def gha_fit(features, d_h, learning_rate, epochs, seed):
    """Run ``epochs`` passes of GHA, reshuffling the samples each epoch."""
    x = feature_matrix(features)
    rng = make_rng(seed)
    state = gha_init(x.shape[1], d_h, learning_rate, rng)
    for _ in range(epochs):
        state = gha_epoch(state, x, rng.permutation(x.shape[0]))
    proj = gha_finalize(state)
    proj.seen = x.shape[0] * epochs
    proj.stats["seed"] = int(seed)
    return replace(proj, **_provenance(features))


# -- baselines and metrics ----------------------------------------------------


def random_projector(d_in, d_h, rng):
    """Projector with i.i.d. Gaussian(0, 1/d_in) entries."""
    _check_dims(d_in, d_h)
    u = rng.standard_normal((d_h, d_in)) / np.sqrt(d_in)
    return Projector(u=u, algorithm="random")


def fit_projector(features, d_h, algorithm="ipca", centered=False, batch_size=64,
                  epochs=50, learning_rate=1e-3, seed=0, complete_basis=False):
    """Dispatch to one of the estimators by name."""
    x = feature_matrix(features)
    if algorithm == "exact":
        return exact_pca(features, d_h, centered)
    if algorithm == "ipca":
        return ipca_fit(features, d_h, batch_size, centered, complete_basis)
    if algorithm == "gha":
        if centered:
            raise ValueError("GHA operates on raw (uncentered) features")
        return gha_fit(features, d_h, learning_rate, epochs, seed)
    if algorithm == "random":
        return replace(random_projector(x.shape[1], d_h, make_rng(seed)), **_provenance(features))
    raise ValueError(f"unknown projector algorithm {algorithm!r}")


def reconstruction_error(p, features):
    """Mean squared reconstruction error ``||x - decode(encode(x))||^2``."""
    x = feature_matrix(features)
    if x.shape[1] != p.d_in:
        raise ShapeError(f"features have {x.shape[1]} columns, projector expects {p.d_in}")
    xc = x - p.mean
    resid = xc - (xc @ p.u.T) @ p.u
    err = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(err):
        raise NonFiniteError("reconstruction error is not finite")
    return err


def subspace_distance(u1, u2):
    """Largest principal angle (radians) between the row spaces of two matrices."""
    u1 = as_matrix(u1, "u1")
    u2 = as_matrix(u2, "u2")
    if u1.shape != u2.shape:
        raise ShapeError(f"shapes differ: {u1.shape} vs {u2.shape}")
    q1 = orthonormal_rows(u1)
    q2 = orthonormal_rows(u2)
    # arccos(cos_min) loses ~8 digits near zero; pair it with the sine of the
    # same (largest) angle, taken from the part of q2 orthogonal to q1
    cos_min = np.linalg.svd(q1 @ q2.T, compute_uv=False).min()
    resid = q2 - (q2 @ q1.T) @ q1
    sin_max = np.linalg.svd(resid, compute_uv=False).max()
    return float(np.arctan2(min(sin_max, 1.0), max(min(cos_min, 1.0), 0.0)))


def orthonormality_defect(u):
    """``max |U U^T - I|``."""
    u = np.asarray(u)
    return float(np.abs(u @ u.T - np.eye(u.shape[0])).max())
