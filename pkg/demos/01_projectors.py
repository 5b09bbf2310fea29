"""Fitting input projectors forward-only: exact PCA, incremental PCA, GHA, random.

Every projector is a d_h x d_in matrix U with orthonormal rows; the quality
measure is the mean squared reconstruction error ||x - U^T U x||^2.
"""

import numpy as np

from ipakit.matcore import make_rng
from ipakit.projector import (
    exact_pca,
    gha_fit,
    ipca_fit,
    random_projector,
    reconstruction_error,
    subspace_distance,
)

# %% anisotropic data in a random basis (eigenvalues 1.3**-i)
rng = make_rng(0)
q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
x = (rng.standard_normal((2000, 16)) * np.sqrt(1.3 ** -np.arange(16.0))) @ q.T

# %% the optimum: error equals the sum of the discarded eigenvalues
exact = exact_pca(x, 4)
ev = np.sort(np.linalg.eigvalsh(x.T @ x / len(x)))
print("exact PCA error", reconstruction_error(exact, x), "trailing eigenvalues", ev[:12].sum())

# %% streaming IPCA: batch size barely matters when the eigengap is clear
for b in (1, 10, 2000):
    p = ipca_fit(x, 4, batch_size=b)
    print(f"IPCA batch {b:>4}: angle to exact {subspace_distance(p.u, exact.u):.4f} rad")

# %% GHA (Sanger's rule) converges online: 50 epochs at lr 1e-3 on 200 rows
xg = rng.standard_normal((200, 8)) * np.sqrt(np.arange(8.0, 0.0, -1.0))
g = gha_fit(xg, 3, 1e-3, 50, seed=0)
print("GHA angle", subspace_distance(g.u, exact_pca(xg, 3).u),
      "row norms", np.round(np.linalg.norm(g.u, axis=1), 3))

# %% a random projector is the LoRA-like baseline: much worse reconstruction
r = random_projector(16, 4, rng)
print("random error", reconstruction_error(r, x), "vs exact", reconstruction_error(exact, x))
