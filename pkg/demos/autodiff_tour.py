# %% [markdown]
# # Reverse-mode autodiff on a tape
#
# Every differentiable call records a node on a `Tape`. `backward` walks the
# tape in reverse and returns gradients keyed by the names given to `watch`.

# %%
import numpy as np

from malariadx import ops
from malariadx.gradcheck import finite_diff_gradient, relative_error
from malariadx.tensor import Tape, Tensor, backward

rng = np.random.default_rng(0)
x_data = rng.normal(size=(2, 3, 6, 6))
w_data = rng.normal(size=(4, 3, 3, 3)) * 0.3

# %%
tape = Tape()
w = tape.watch(w_data, "w")
h = ops.relu(ops.conv2d(Tensor(x_data), w, stride=1, pad=1))
loss = ops.mean_all(h)
grads = backward(tape, loss)
print("loss", loss.item(), "tape length", len(tape))
print("grad shape", grads["w"].shape)

# %% [markdown]
# Central differences give an independent estimate. Relu kinks are rare at
# random inputs, so the two should agree closely in float64.

# %%
def f(weights):
    return ops.mean_all(ops.relu(ops.conv2d(Tensor(x_data), weights, stride=1, pad=1)))

numeric = finite_diff_gradient(f, Tensor(w_data))
print("relative error", relative_error(grads["w"], numeric))
