"""
Reverse-mode autodiff on small tensors
======================================

Every tensor is an immutable float64 array plus a backward closure.
``backward(loss, params)`` walks the graph in reverse topological order
and returns one gradient per named parameter.  Here we build a tiny
softplus network, differentiate it, and compare against central finite
differences.
"""
import numpy as np

from infodrop import tensor as T
from infodrop.gradcheck import grad_check
from infodrop.nn import ForwardContext, Linear, Sequential, dense_block
from infodrop.tensor import Rng, Tensor, backward

# a quadratic first: d/dx sum(x * x) = 2x
x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
print("grad of sum(x*x):", backward(T.sum(T.mul(x, x)), {"x": x})["x"])

# shapes must match exactly; there is no implicit broadcasting
try:
    T.add(Tensor(np.ones(3)), Tensor(np.ones((2, 3))))
except ValueError as exc:
    print("refused:", exc)

# %%
# A small network and its cross-entropy loss
rng = Rng(0)
net = Sequential(dense_block(6, 8, "softplus", rng.child(0)), Linear(8, 3, rng.child(1)))
inputs = Tensor(rng.child(2).normal((5, 6)))
labels = np.array([0, 2, 1, 1, 0])


def loss():
    return T.softmax_cross_entropy(net(inputs, ForwardContext(training=True)), labels)


params = net.parameters()
grads = backward(loss(), params)
for name, g in grads.items():
    print(f"{name:>20s}  shape {g.shape}  |g| = {np.linalg.norm(g):.4f}")

# %%
# Central differences with h = 1e-4 agree to well below 1e-5 relative error
errors = grad_check(loss, params)
print("worst relative error:", max(errors.values()))
