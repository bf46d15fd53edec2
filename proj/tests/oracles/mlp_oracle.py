# Forward pass and gradients of a 2-3-2 tanh network, computed with numpy.
import numpy as np

n = 3 * 2 + 3 + 2 * 3 + 2
p = np.array([0.1 * (i + 1) * (-1) ** i for i in range(n)])
W0 = p[0:6].reshape(3, 2); b0 = p[6:9]
W1 = p[9:15].reshape(2, 3); b1 = p[15:17]
x = np.array([0.5, -1.25])
h = np.tanh(W0 @ x + b0)
y = W1 @ h + b1
print("y =", repr(y.tolist()))
# loss = 0.5 * |y - t|^2
t = np.array([0.3, -0.7])
g = y - t
dW1 = np.outer(g, h); db1 = g
dh = W1.T @ g
dz = dh * (1 - h ** 2)
dW0 = np.outer(dz, x); db0 = dz
grad = np.concatenate([dW0.ravel(), db0, dW1.ravel(), db1])
print("grad =", repr(grad.tolist()))
