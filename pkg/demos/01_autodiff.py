"""
Reverse-mode autodiff on a tiny regression
==========================================

Tensors record their parents while a ``Graph`` is active, and
``Graph.backward`` accumulates gradients into every parameter that
contributed. Here we fit y = 3x - 1 with a 1x1 linear layer and AdamW,
then compare one gradient against central finite differences.
"""
import numpy as np

from coffeelab import autodiff as ad

rng = np.random.default_rng(0)
x = rng.uniform(-1, 1, (64, 1)).astype(np.float32)
y = 3 * x - 1

w = ad.param([[0.0]])
b = ad.param([0.0])
params = [w, b]
states = ad.make_states(params, lr=0.05, weight_decay=0.0)

for step in range(300):
    ad.zero_grads(params)
    with ad.Graph() as g:
        loss = ad.mse(ad.add(ad.matmul(ad.const(x), w), b), ad.const(y))
        g.backward(loss)
    ad.adamw_step(params, states)
    if step % 100 == 0:
        print(f"step {step:3d}  loss {loss.item():.5f}")

print(f"fitted w = {w.data[0, 0]:.3f}, b = {b.data[0]:.3f}")

# Gradient check on the cosine similarity, in float64.
v = ad.param(rng.normal(size=6), np.float64)
u = ad.const(rng.normal(size=6), np.float64)
with ad.Graph() as g:
    g.backward(ad.cosine_similarity(v, u))

h = 1e-6
fd = np.zeros(6)
for i in range(6):
    e = np.zeros(6)
    e[i] = h
    up = ad.cosine_similarity(ad.const(v.data + e, np.float64), u).item()
    down = ad.cosine_similarity(ad.const(v.data - e, np.float64), u).item()
    fd[i] = (up - down) / (2 * h)
print("max |autodiff - finite difference| =", np.abs(v.grad - fd).max())
