"""Small fully-connected nets with hand-written backprop.

Hidden layers use ``tanh``; the output is either the identity (value heads)
or a logistic squash into [0, 1] (policy head).  ``forward`` caches the
activations of the last call so ``backward`` can return exact gradients of a
scalar loss given its derivative with respect to the outputs.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class GradientTape:
    weights: list
    biases: list
    input_grad: np.ndarray | None = None

    def flat(self):
        return np.concatenate([g.ravel() for pair in zip(self.weights, self.biases) for g in pair])

    def scale(self, k):
        return GradientTape([w * k for w in self.weights], [b * k for b in self.biases],
                            None if self.input_grad is None else self.input_grad * k)

    def __add__(self, other):
        return GradientTape([a + b for a, b in zip(self.weights, other.weights)],
                            [a + b for a, b in zip(self.biases, other.biases)])


class Mlp:
    def __init__(self, sizes, output="identity", rng=None, init_scale=1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output {output!r}")
        self.sizes = [int(s) for s in sizes]
        self.output = output
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            std = init_scale / np.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    # ------------------------------------------------------------------
    @classmethod
    def zeros(cls, sizes, output="identity"):
        net = cls(sizes, output, rng=0)
        for w, b in zip(net.weights, net.biases):
            w[...] = 0.0
            b[...] = 0.0
        return net

    def copy(self):
        net = Mlp.__new__(Mlp)
        net.sizes = list(self.sizes)
        net.output = self.output
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net._cache = None
        return net

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[i : i + w.size].reshape(w.shape)
            i += w.size
            b[...] = flat[i : i + b.size]
            i += b.size

    # ------------------------------------------------------------------
    def forward(self, x):
        """Evaluate on one input vector (returns a scalar for 1 output) or a batch (rows)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.sizes[0]:
            raise ValueError(f"input has {X.shape[1]} features, net expects {self.sizes[0]}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if k < last:
                h = np.tanh(z)
            else:
                h = _sigmoid(z) if self.output == "sigmoid" else z
            acts.append(h)
        self._cache = (acts, single)
        out = h[0] if single else h
        if self.sizes[-1] == 1:
            out = out[0] if single else out[:, 0]
        return float(out) if single and np.ndim(out) == 0 else out

    __call__ = forward

    def backward(self, upstream):
        """Gradients of ``sum(upstream * output)`` for the cached forward call.

        ``upstream`` has the shape of the last forward's output.  Batch
        gradients are summed over rows.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, single = self._cache
        n = acts[0].shape[0]
        g = np.asarray(upstream, dtype=np.float64).reshape(n, self.sizes[-1])
        out = acts[-1]
        if self.output == "sigmoid":
            g = g * out * (1.0 - out)
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = acts[k]
            dws[k] = g.T @ h_in
            dbs[k] = g.sum(axis=0)
            g = g @ self.weights[k]
            if k > 0:
                g = g * (1.0 - h_in**2)
        input_grad = g[0] if single else g
        return GradientTape(dws, dbs, input_grad)

    def sgd_step(self, tape, lr):
        for w, b, dw, db in zip(self.weights, self.biases, tape.weights, tape.biases):
            if dw.shape != w.shape or db.shape != b.shape:
                raise ValueError("gradient tape does not match network shapes")
            w -= lr * dw
            b -= lr * db
        if not all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases)):
            raise FloatingPointError("non-finite parameters after update")
        return self

    # ------------------------------------------------------------------
    def to_dict(self):
        return {"version": CHECKPOINT_VERSION, "sizes": self.sizes, "output": self.output,
                "params": self.get_flat().tolist()}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        net = cls.zeros(d["sizes"], d["output"])
        net.set_flat(d["params"])
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net, s):
    return net.forward(s)


def backward(net, upstream):
    return net.backward(upstream)


def sgd_step(net, tape, lr):
    return net.sgd_step(tape, lr)


def mse_gradient(net, X, y):
    """Loss ``mean((net(X) - y)^2)`` and its gradient tape."""
    pred = net.forward(X)
    err = pred - np.asarray(y, dtype=np.float64)
    n = max(err.size, 1)
    loss = float(np.mean(err**2)) if err.size else 0.0
    return loss, net.backward(2.0 * err / n)


def log_prob_gradient(policy, s, a, std=0.05):
    """Gradient of ``log N(a; policy(s), std^2)`` with respect to the policy parameters.

    Works on a single state or a batch (summed over rows).
    """
    mu = policy.forward(s)
    score = (np.asarray(a, dtype=np.float64) - mu) / (std * std)
    return policy.backward(score)


def gaussian_log_prob(policy, s, a, std=0.05):
    mu = policy.forward(s)
    return -0.5 * ((a - mu) / std) ** 2 - np.log(std * np.sqrt(2.0 * np.pi))


class Adam:
    """Adam moment estimates for one net; ``step`` applies the update in place."""

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(net.n_params)
        self.v = np.zeros(net.n_params)
        self.k = 0

    def step(self, tape):
        g = tape.flat()
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
        self.k += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mhat = self.m / (1.0 - self.b1**self.k)
        vhat = self.v / (1.0 - self.b2**self.k)
        self.net.set_flat(self.net.get_flat() - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return self.net
