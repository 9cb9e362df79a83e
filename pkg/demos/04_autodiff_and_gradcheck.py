# The tape-based autodiff engine, exercised on a toy two-layer net,
# then cross-checked against central finite differences.
#
# Every model in this package trains through this engine; nothing else
# computes gradients. The finite-difference harness is the independent
# referee: at float64 the two must agree to ~1e-6 relative.

import numpy as np

from mmjepa import tensor as T
from mmjepa.gradcheck import grad_check
from mmjepa.optim import CosineSchedule, adam_step
from mmjepa.tensor import Parameter, zero_grads

rng = np.random.default_rng(0)

# a tiny regression problem: y = sin(3x), 64 points
x = np.linspace(-1, 1, 64).reshape(-1, 1)
y = np.sin(3 * x)

w1 = Parameter(rng.normal(0, 0.5, (1, 32)), name="w1", dtype=np.float64)
b1 = Parameter(np.zeros((32,)), name="b1", dtype=np.float64)
w2 = Parameter(rng.normal(0, 0.5, (32, 1)), name="w2", dtype=np.float64)
b2 = Parameter(np.zeros((1,)), name="b2", dtype=np.float64)
params = [w1, b1, w2, b2]


def loss_fn():
    h = T.gelu(T.add(T.matmul(T.constant(x, dtype=np.float64), w1), b1))
    pred = T.add(T.matmul(h, w2), b2)
    return T.mse(pred, T.constant(y, dtype=np.float64))


# gradient check BEFORE training: compare the tape's gradients against
# central differences on a random subset of coordinates per parameter
err = grad_check(loss_fn, params, max_coords_per_param=20, rng=np.random.default_rng(1))
print(f"finite-difference check: max rel err {err:.2e}")

sched = CosineSchedule(lr_max=1e-2, lr_min=1e-4, total_steps=400)
for step in range(400):
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    adam_step(params, sched.lr_at(step))
    if step % 100 == 0 or step == 399:
        print(f"step {step:3d}  mse {float(loss.data):.5f}")

# the trained net should fit sin(3x) closely
h = T.gelu(T.add(T.matmul(T.constant(x, dtype=np.float64), w1), b1))
pred = T.add(T.matmul(h, w2), b2).data
print("final max abs error:", float(np.abs(pred - y).max()))
