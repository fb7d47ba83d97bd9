"""
Reverse-mode gradients on a tape
================================

Every differentiable op run inside a ``GradientTape`` appends a record;
``backward`` walks the records in reverse.  Here we check one LSTM step
against central finite differences.
"""

import numpy as np

from stefnet import autodiff as ad
from stefnet.autodiff import GradientTape, Tensor

rng = np.random.default_rng(0)
d, u = 3, 2

x = Tensor(rng.normal(size=(1, d)))
h0 = Tensor(np.zeros((1, u)))
c0 = Tensor(np.zeros((1, u)))
w_in = Tensor(rng.normal(size=(d, 4 * u)), requires_grad=True, name="w_input")
w_hid = Tensor(rng.normal(size=(u, 4 * u)), requires_grad=True, name="w_hidden")
bias = Tensor(np.zeros(4 * u), requires_grad=True, name="bias")

with GradientTape() as tape:
    h, c = ad.lstm_step(x, h0, c0, w_in, w_hid, bias)
    loss = ad.sum_all(h)

print("records on the tape:", [r.kind for r in tape.records])
ad.backward(loss, tape)

# the same derivative, numerically, for one entry of the input weights
eps = 1e-6
w = w_in.data
w[0, 0] += eps
up = ad.lstm_step(x, h0, c0, w_in, w_hid, bias)[0].data.sum()
w[0, 0] -= 2 * eps
down = ad.lstm_step(x, h0, c0, w_in, w_hid, bias)[0].data.sum()
w[0, 0] += eps

print("analytic d loss / d w_input[0, 0]:", w_in.grad[0, 0])
print("central difference             :", (up - down) / (2 * eps))

# calling backward again recomputes from scratch rather than accumulating
ad.backward(loss, tape)
print("after a second backward        :", w_in.grad[0, 0])
