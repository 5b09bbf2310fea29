"""Dense float64 linear algebra and seeded random numbers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
helpers here add the guarantees the rest of the package relies on: shape
and finiteness checks, a fixed summation order for :func:`matmul`, and a
deterministic sign convention for eigen- and singular vectors so that
projector checkpoints are byte-stable.

Random numbers come from numpy's PCG64 bit generator, always constructed
explicitly from an integer seed through :func:`make_rng`.
"""

import numpy as np

from .errors import ConvergenceError, NonFiniteError, ShapeError

# relative tolerance for the "ties: first index" rule of the sign convention
_TIE_RTOL = 1e-12


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by PCG64 for ``seed``."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*parts):
    """Mix integers/strings into a fresh 64-bit seed (stable across runs)."""
    import hashlib

    h = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def as_matrix(a, name="matrix"):
    """Validate ``a`` as a non-empty, finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name="vector"):
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return v


def matmul(a, b):
    """Dense product ``a @ b`` with a fixed, sequential summation order.

    Entry ``(i, j)`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``
    exactly like a naive triple loop, so the result is bitwise reproducible
    and independent of the BLAS library in use.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def _sign_flips(rows):
    """+1/-1 per row so that each row's largest-magnitude entry is positive."""
    mags = np.abs(rows)
    top = mags.max(axis=1, keepdims=True)
    # first index whose magnitude ties the maximum (up to rounding)
    idx = np.argmax(mags >= top * (1.0 - _TIE_RTOL), axis=1)
    picked = rows[np.arange(rows.shape[0]), idx]
    return np.where(picked < 0, -1.0, 1.0)


def _round_robin(n):
    """Pairings of ``range(n)`` into disjoint (p, q) index arrays, one per round.

    Circle-method tournament; every unordered pair appears exactly once per
    sweep. Odd ``n`` gets a dummy player whose pairs are dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig_desc(s, tol=1e-14, max_sweeps=None):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations within one round of a round-robin ordering touch disjoint
    index pairs, so they are applied together; the result is identical to
    applying them one after another.

    Parameters
    ----------
    s : (n, n) array_like
        Symmetric input (relative asymmetry at most 1e-12).
    tol : float
        Stop once the off-diagonal Frobenius norm falls below ``tol * ||s||_F``.
    max_sweeps : int, optional
        Iteration cap, defaults to ``100 * n`` sweeps.

    Returns
    -------
    eigenvalues : (n,) ndarray, sorted descending
    eigenvectors : (n, n) ndarray whose columns match ``eigenvalues``; each
        column's largest-magnitude entry is positive.
    """
    a = as_matrix(s, "s")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"sym_eig_desc needs a square matrix, got {a.shape}")
    scale = np.abs(a).max()
    if np.abs(a - a.T).max() > 1e-12 * max(scale, np.finfo(float).tiny):
        raise ShapeError("sym_eig_desc needs a symmetric matrix")
    if max_sweeps is None:
        max_sweeps = 100 * n

    a = 0.5 * (a + a.T)
    v = np.eye(n)
    fro = np.sqrt(np.sum(a * a))
    offmask = 1.0 - np.eye(n)
    rounds = _round_robin(n)
    eps = np.finfo(float).eps
    converged = fro == 0.0 or n == 1
    sweep = 0
    while not converged:
        if sweep >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
        off = np.sqrt(np.sum(a * a * offmask))
        if off <= tol * fro:
            break
        rotated = False
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = np.abs(apq) > eps * 0.5 * np.sqrt(np.abs(app * aqq))
            active &= apq != 0.0
            if not active.any():
                continue
            rotated = True
            safe = np.where(active, apq, 1.0)
            tau = (aqq - app) / (2.0 * safe)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)
            sn = np.where(active, t * c, 0.0)
            rp = a[p, :].copy()
            rq = a[q, :]
            a[p, :] = c[:, None] * rp - sn[:, None] * rq
            a[q, :] = sn[:, None] * rp + c[:, None] * rq
            cp = a[:, p].copy()
            cq = a[:, q]
            a[:, p] = cp * c - cq * sn
            a[:, q] = cp * sn + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = vp * c - vq * sn
            v[:, q] = vp * sn + vq * c
        sweep += 1
        if not rotated:
            break

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    v = v * _sign_flips(v.T)[None, :]
    return w, v


def thin_svd(m):
    """Thin SVD ``m = u @ diag(s) @ vt`` with deterministic signs.

    Backed by LAPACK through :func:`numpy.linalg.svd`. Each row of ``vt`` is
    flipped so its largest-magnitude entry is positive, and the matching
    column of ``u`` is flipped with it.
    """
    m = as_matrix(m, "m")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD did not converge: {exc}") from exc
    flips = _sign_flips(vt)
    return u * flips[None, :], s, vt * flips[:, None]


def cosine(a, b):
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero-norm vector")
    if np.array_equal(a, b):
        # exact for identical inputs; dot / (na * nb) can miss 1 by an ulp
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def orthonormal_rows(u, rtol=1e-10):
    """Orthonormal basis (as rows) of the row space of ``u``.

    Raises ``ShapeError`` when ``u`` is numerically rank deficient.
    """
    u = as_matrix(u, "u")
    if u.shape[0] > u.shape[1]:
        raise ShapeError(f"{u.shape[0]} rows cannot be independent in R^{u.shape[1]}")
    _, s, vt = thin_svd(u)
    if s[-1] <= rtol * s[0] or s[0] == 0.0:
        raise ShapeError("row space is rank deficient")
    return vt
