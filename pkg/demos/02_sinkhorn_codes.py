"""Equal-partition codes: how epsilon, iterations and the clamp shape them."""

import numpy as np

from mtpretrain.transport import PrototypeBank, prototype_scores, sinkhorn_codes

rng = np.random.default_rng(1)


def unit(n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def marginal_gap(q):
    b, k = q.shape
    return max(abs(q.sum(1) - 1 / b).max(), abs(q.sum(0) - 1 / k).max())


bank = PrototypeBank.create(8, 16, rng)
f = unit(6, 16)
s = prototype_scores(f, bank).data
print("scores (6 x 8), min/max:", s.min().round(3), s.max().round(3))

# sharper codes as epsilon shrinks
for eps in (1.0, 0.3, 0.05):
    q = sinkhorn_codes(s, eps, n_iters=50)
    print(f"eps={eps:<5} largest code {q.max():.4f}  row argmax {q.argmax(1)}")

# small epsilon converges slowly: the gap after n sweeps
for n in (3, 10, 50, 200):
    print(f"n_iters={n:<4} marginal gap {marginal_gap(sinkhorn_codes(s, 0.05, n)):.2e}")

# the clamp: scores/eps capped at t_max keeps exp finite for any input
wild = rng.uniform(-1e8, 1e8, size=(4, 5))
q = sinkhorn_codes(wild, epsilon=1e-3, n_iters=50, t_max=10.0)
print("huge scores -> finite:", np.isfinite(q).all(), " row sums", q.sum(1))

# the 2x2 diagonal case with and without truncation
diag = np.array([[10.0, 0.0], [0.0, 10.0]])
print("t_max=10 :", sinkhorn_codes(diag, 0.05, 50, t_max=10.0).ravel())
print("t_max=inf:", sinkhorn_codes(diag, 0.05, 50, t_max=np.inf).ravel())
