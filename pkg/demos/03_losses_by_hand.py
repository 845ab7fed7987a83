"""The four task losses on hand-sized inputs, and their weighted sum."""

import numpy as np

from mtpretrain.objectives import (AsymmetricLossParams, LossWeights, asymmetric_multilabel_loss,
                                   mim_loss, momentum_distillation_loss, total_loss)
from mtpretrain.tensor import Tensor

# asymmetric loss: a positive at p=0.5 costs 10 * 0.5^4 * ln 2
print("ASL, p=0.5 positive:", asymmetric_multilabel_loss(Tensor([[0.0]]), [[1]]).item())
print("ASL, p=0.5 negative:", asymmetric_multilabel_loss(Tensor([[0.0]]), [[0]]).item())
# with both focusing exponents at zero it is plain cross-entropy
bce = asymmetric_multilabel_loss(Tensor([[0.0]]), [[1]], AsymmetricLossParams(1.0, 0, 0))
print("gammas 0 -> BCE:", bce.item(), "vs ln 2 =", np.log(2))

# reconstruction error over masked patches only
rng = np.random.default_rng(0)
x = rng.uniform(size=(1, 64, 64, 3))
mask = np.array([[[True, False], [False, False]]])
y = x.copy()
y[0, :32, :32] += 0.1      # inside the masked patch
y[0, 32:, 32:] += 5.0      # outside: ignored
print("MIM:", mim_loss(Tensor(y), x, mask, patch_size=32).item())

# distillation between similarity profiles (1,0,0) and (0,1,0)
q0 = Tensor(np.eye(3))
kl = momentum_distillation_loss(Tensor([[1.0, 0, 0]]), Tensor([[0.0, 1, 0]]), q0, tau=0.1)
print("symmetric KL:", kl.item())

w = LossWeights()
print("weights:", w)
print("total on unit terms:", total_loss(1.0, 1.0, 1.0, 1.0, w).item())
