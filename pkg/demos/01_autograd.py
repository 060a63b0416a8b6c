"""
Reverse-mode gradients on numpy arrays
======================================

A two-layer GeLU network, differentiated by the tape and checked against
central finite differences in float64.
"""

import numpy as np

from lomoe import tensor as T

rng = T.Rng(0)
x = rng.normal((4, 6))
w1 = T.Tensor(rng.normal((8, 6)), requires_grad=True)
w2 = T.Tensor(rng.normal((2, 8)), requires_grad=True)


def loss():
    h = T.gelu(T.linear(T.Tensor(x), w1))
    return T.tsum(T.sigmoid(T.linear(h, w2)))


with T.precision(np.float64):
    w1.data = w1.data.astype(np.float64)
    w2.data = w2.data.astype(np.float64)
    T.backward(loss())

    # nudge one weight each way and compare the slope with the stored gradient
    i, h = (3, 2), 1e-6
    old = w1.data[i]
    w1.data[i] = old + h
    up = loss().item()
    w1.data[i] = old - h
    down = loss().item()
    w1.data[i] = old

print(f"tape gradient     {w1.grad[i]:+.10f}")
print(f"finite difference {(up - down) / (2 * h):+.10f}")

# Frozen tensors sit on the tape but never receive a gradient buffer.
frozen = T.Tensor(rng.normal((8, 6)))
live = T.Tensor(rng.normal((2, 8)), requires_grad=True)
T.backward(T.tsum(T.linear(T.gelu(T.linear(T.Tensor(x), frozen)), live)))
print("frozen grad:", frozen.grad, "| live grad shape:", live.grad.shape)
