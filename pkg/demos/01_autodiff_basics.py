"""Tour of the tensor engine: forward ops, reverse-mode gradients, and the
finite-difference checker.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

import tsdet.tensor as T
from tsdet.params import ParameterSet
from tsdet.tensor import Tape, Tensor, backward, grad_check

# --- forward ops ------------------------------------------------------------
x = Tensor([[1.0, 2.0], [3.0, 4.0]])
print("sigmoid(0) =", T.sigmoid(Tensor([0.0])).data)
print("softmax of a constant row:", T.softmax_lastdim(Tensor([1.0, 1.0, 1.0])).data)

ones = Tensor(np.ones((1, 1, 3, 3)))
print("3x3 conv of ones against ones:", T.conv2d(ones, ones).data.reshape(()))

# --- gradients through a tape -----------------------------------------------
params = ParameterSet()
w = params.add("w", [2.0, -1.0, 0.5])
with Tape():
    loss = T.tsum(T.mul(w, w))       # sum of squares
    backward(loss)
print("d(sum w^2)/dw =", w.grad, "(expected 2w)")

# a tape is consumed by one backward pass; a new forward pass records a new tape
params.zero_grads()
with Tape():
    loss = T.tmean(T.relu(w))
    backward(loss)
print("d(mean relu(w))/dw =", w.grad)

# --- finite-difference verification ------------------------------------------
point = ParameterSet()
point.add("logits", np.random.default_rng(0).normal(0, 1, (4, 3)).astype(np.float32))
target = np.array([0, 2, 1, 1])


def cross_entropy(p):
    probs = T.softmax_lastdim(p["logits"])
    return T.mul(T.tsum(T.log(T.gather_lastdim(probs, target))), -1.0)


report = grad_check(cross_entropy, point, h=1e-3, tol=1e-4)
print(report)

# custom ops plug into the same tape; a wrong local gradient is caught
def bad_square(t):
    def bwd(g):
        return (g * 3.0 * t.data,)  # should be 2x
    return T.apply_op("bad_square", (t,), t.data * t.data, bwd)


bad = ParameterSet()
bad.add("w", [1.0, 2.0])
print("negative control:", grad_check(lambda p: T.tsum(bad_square(p["w"])), bad))
