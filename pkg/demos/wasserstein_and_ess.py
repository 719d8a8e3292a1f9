"""
Gaussian W2 and importance-sampling efficiency
==============================================

The two diagnostics that steer and score training: the 2-Wasserstein
distance between Gaussian fits of feature vectors, and the Kish effective
sample size of importance weights.
"""
import numpy as np

from splitbg.autodiff import Tape, Tensor
from splitbg.training import gaussian_w2, importance_weights, streaming_moments, w2_loss

rng = np.random.default_rng(0)

# W2 between N(0, 1) and N(2, 4) in 1-D is (0 - 2)^2 + (1 - 2)^2 = 5
print("1-D W2:", gaussian_w2(np.zeros(1), np.eye(1), np.full(1, 2.0), 4 * np.eye(1), reg=0.0).value)

# a correlated reference set, summarised once by streaming moments
ref = rng.standard_normal((5000, 4)) @ rng.standard_normal((4, 4))
moments = streaming_moments(np.array_split(ref, 10))
print("W2(reference, itself):", w2_loss(ref, moments).value)

# a shifted, squashed sample is further away, and the loss is differentiable
with Tape() as tape:
    q = Tensor(0.5 * ref[:1000] + 1.0, requires_grad=True)
    loss = w2_loss(q, moments)
    (g,) = tape.gradient(loss, [q])
print("W2(shifted sample):", loss.value, " gradient norm:", np.linalg.norm(g))

# effective sample size in percent
print("uniform weights:", importance_weights(np.zeros(1000)).ess)
lw = rng.normal(0.0, 1.0, 1000)
print("log-normal weights, sd 1:", importance_weights(lw).ess)
print("log-normal weights, sd 3:", importance_weights(3 * lw).ess)
print("shifted by 1e3:", importance_weights(3 * lw + 1e3).ess)
