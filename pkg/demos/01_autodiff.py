"""
Reverse-mode gradients on numpy arrays
======================================

The network is built from a small set of differentiable ops. Each op records
how to push a gradient back to its inputs; ``backward`` walks that record in
reverse. Here we differentiate an LSTM step and a tanh readout, then check the
result against central finite differences.
"""
import numpy as np

from exitpolicy import tensor as T

rng = np.random.default_rng(0)

# %%
# A tiny regression: one LSTM cell, then a linear readout.
x = T.Tensor(rng.normal(size=(4, 3)))
h0 = T.Tensor(rng.normal(size=(4, 5)))
c0 = T.Tensor(rng.normal(size=(4, 5)))
W = T.Tensor(rng.normal(scale=0.3, size=(8, 20)), requires_grad=True)
b = T.Tensor(np.zeros(20), requires_grad=True)
readout = T.Tensor(rng.normal(size=(5, 1)), requires_grad=True)
target = rng.normal(size=(4, 1))


def loss():
    h, _ = T.lstm_cell(x, h0, c0, W, b)
    y = T.tanh(T.matmul(T.layer_norm(h), readout))
    return T.mean(T.square(T.sub(y, target)))


value = loss()
T.backward(value)
print(f"loss {value.item():.5f}, |dL/dW| {np.linalg.norm(W.grad):.5f}")

# %%
# Finite differences on a few entries of W. The two columns should agree
# to about seven digits in float64.
flat = W.data.reshape(-1)
for k in rng.choice(flat.size, size=5, replace=False):
    old = flat[k]
    flat[k] = old + 1e-6
    with T.no_grad():
        up = loss().item()
    flat[k] = old - 1e-6
    with T.no_grad():
        down = loss().item()
    flat[k] = old
    print(f"W[{k:3d}]  backprop {W.grad.reshape(-1)[k]: .8f}   numeric {(up - down) / 2e-6: .8f}")

# %%
# Non-finite values stop the graph at the op that produced them.
try:
    with np.errstate(invalid="ignore"):
        T.mul(T.Tensor(np.array([np.inf])), T.Tensor(np.array([0.0])))
except T.NonFiniteError as e:
    print("caught:", e)
