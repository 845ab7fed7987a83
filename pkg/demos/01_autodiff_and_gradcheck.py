"""Reverse mode on a tiny attention layer, checked against finite differences."""

import numpy as np

from mtpretrain import tensor as T
from mtpretrain.gradcheck import grad_check
from mtpretrain.model import attention
from mtpretrain.tensor import Tensor

rng = np.random.default_rng(0)

# one query set (5 x 8) attending over a batch of two 3-token memories
q = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
kv = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)

out = attention(q, kv, kv, heads=2)
print("attention output", out.shape)

loss = (out ** 2).mean()
reached = loss.backward()
print("loss", loss.item(), "| leaves reached:", len(reached))
print("dL/dq row 0:", np.round(q.grad[0], 4))

# the same gradients, probed by central differences
report = grad_check(lambda: (attention(q, kv, kv, heads=2) ** 2).mean(), {"q": q, "kv": kv})
print(report.summary())

# softmax stays finite far outside exp's range
x = Tensor([1e4, 1e4 + np.log(2.0)])
print("softmax at 1e4:", T.softmax(x, tau=1.0).data)

# clamp_max passes gradient only strictly below the threshold
t = Tensor([1.0, 10.0, 100.0], requires_grad=True)
T.clamp_max(t, 10.0).sum().backward()
print("clamp_max grad:", t.grad)
