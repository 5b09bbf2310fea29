"""LoRA, DoRA and IPA on a single frozen linear layer.

Shows the zero-init property (adapted output equals the frozen output),
merging into a dense weight, and a finite-difference check of the
hand-written gradients.
"""

import numpy as np

from ipakit.adapters import FrozenLinear, forward, init_dora, init_ipa, init_lora, merge, vjp
from ipakit.matcore import make_rng
from ipakit.projector import exact_pca

rng = make_rng(0)
w = FrozenLinear(rng.standard_normal((6, 8)))
x = rng.standard_normal((32, 8))

adapters = {
    "lora": init_lora(w, 2, 4.0, rng),
    "dora": init_dora(w, 2, 4.0, rng),
    "ipa": init_ipa(w, exact_pca(x, 2), 0.5),  # U frozen, only B trains
}

# %% at init B = 0, so every variant reproduces W x exactly
for name, ad in adapters.items():
    z, _ = forward(ad, w, x)
    print(f"{name}: init deviation {np.max(np.abs(z - w(x))):.1e}, trainable {ad.trainable()}")

# %% perturb B, then merge: W' x matches the adapted forward
for name, ad in adapters.items():
    ad.b = 0.1 * rng.standard_normal(ad.b.shape)
    z, cache = forward(ad, w, x)
    print(f"{name}: merge deviation {np.max(np.abs(x @ merge(ad, w).T - z)):.1e}")

# %% finite-difference check of dL/dB for L = sum(c * z)
ad = adapters["dora"]
c = rng.standard_normal((32, 6))
z, cache = forward(ad, w, x)
grads, _ = vjp(ad, w, cache, c)
b0, eps, fd = ad.b.copy(), 1e-6, np.zeros_like(ad.b)
for idx in np.ndindex(b0.shape):
    vals = []
    for s in (1, -1):
        ad.b = b0.copy()
        ad.b[idx] += s * eps
        vals.append(np.sum(c * forward(ad, w, x)[0]))
    fd[idx] = (vals[0] - vals[1]) / (2 * eps)
ad.b = b0
print("DoRA dL/dB relative error", np.linalg.norm(fd - grads["b"]) / np.linalg.norm(fd))
