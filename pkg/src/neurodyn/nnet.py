"""Small neural-net plumbing: parameter packing, gradient descent, a tiny MLP.

Everything is plain numpy with hand-written gradients; training loops are
full-batch with backtracking line search so loss traces are deterministic
and non-increasing.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch


def pack(arrays) -> np.ndarray:
    """Flatten a sequence of arrays into one parameter vector."""
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unpack(vec, shapes):
    """Split a parameter vector back into arrays of the given shapes."""
    out = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(vec[pos:pos + size].reshape(shape))
        pos += size
    if pos != vec.size:
        raise ShapeMismatch(f"vector of size {vec.size} does not match shapes {shapes}")
    return out


def act(x, kind: str):
    if kind == "identity":
        return x
    if kind == "tanh":
        return np.tanh(x)
    raise ShapeMismatch(f"unknown activation {kind!r}")


def act_deriv_from_output(y, kind: str):
    """Derivative of the activation expressed through its output value."""
    if kind == "identity":
        return np.ones_like(y)
    if kind == "tanh":
        return 1.0 - y * y
    raise ShapeMismatch(f"unknown activation {kind!r}")


def grad_step(params, loss_and_grad, rate: float, max_halvings: int = 40):
    """One full-gradient descent step with backtracking on the step size.

    ``loss_and_grad(vec)`` must return ``(loss, grad_vec)``. The returned
    parameters never have higher loss than the input (the rate is halved
    until the step helps or ``max_halvings`` is hit, in which case the
    original parameters come back).
    """
    params = np.asarray(params, dtype=np.float64)
    loss0, grad = loss_and_grad(params)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    step = float(rate)
    for _ in range(max_halvings + 1):
        candidate = params - step * grad
        loss1, _ = loss_and_grad(candidate)
        if np.isfinite(loss1) and loss1 <= loss0:
            return candidate, float(loss1), step
        step *= 0.5
    return params.copy(), float(loss0), 0.0


def descend(params, loss_and_grad, steps: int, rate: float):
    """Run ``steps`` backtracking gradient steps; returns params and loss trace."""
    trace = []
    for _ in range(steps):
        params, loss, _ = grad_step(params, loss_and_grad, rate)
        trace.append(loss)
    return params, np.array(trace)


@dataclass
class Mlp:
    """One-hidden-layer perceptron with tanh hidden units and linear output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, seed: int, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        return cls(
            w1=scale * rng.standard_normal((n_hidden, n_in)),
            b1=np.zeros(n_hidden),
            w2=scale * rng.standard_normal((n_out, n_hidden)),
            b2=np.zeros(n_out),
        )

    def shapes(self):
        return [self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape]

    def to_vector(self) -> np.ndarray:
        return pack([self.w1, self.b1, self.w2, self.b2])

    @classmethod
    def from_vector(cls, vec, shapes):
        w1, b1, w2, b2 = unpack(vec, shapes)
        return cls(w1=w1, b1=b1, w2=w2, b2=b2)

    def forward(self, x):
        """x: (n_in, batch) -> y: (n_out, batch) plus cache for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        pre = self.w1 @ x + self.b1[:, None]
        hidden = np.tanh(pre)
        y = self.w2 @ hidden + self.b2[:, None]
        return y, (x, hidden)

    def backward(self, cache, dy):
        """Gradients of a scalar loss given d(loss)/dy; returns (grads, dx)."""
        x, hidden = cache
        dw2 = dy @ hidden.T
        db2 = dy.sum(axis=1)
        dhidden = self.w2.T @ dy
        dpre = dhidden * (1.0 - hidden * hidden)
        dw1 = dpre @ x.T
        db1 = dpre.sum(axis=1)
        dx = self.w1.T @ dpre
        return Mlp(w1=dw1, b1=db1, w2=dw2, b2=db2), dx

    def mse_loss_and_grad(self, x, target):
        """Mean squared prediction error and its parameter gradient vector."""
        y, cache = self.forward(x)
        diff = y - target
        n = diff.size
        loss = float(np.mean(diff * diff))
        grads, _ = self.backward(cache, 2.0 / n * diff)
        return loss, grads.to_vector()
