"""Small ReLU MLP with hand-written backward pass and Adam.

Everything runs in float64 on batches: inputs are ``(n, input_dim)`` and the
scalar head returns ``(n,)``. Single vectors are accepted and give scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidConfig


def adam_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update of ``param``, ``m`` and ``v``.

    ``step`` is the 1-based step count after incrementing.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class ForwardCache:
    inputs: list        # input to each layer
    pre: list           # pre-activations of each layer


class MlpDecoder:
    """``depth`` hidden ReLU layers of ``hidden_width`` followed by a linear scalar head."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if not self.weights or self.weights[-1].shape[0] != 1:
            raise InvalidConfig("decoder needs a final layer with one output")
        for w_prev, w in zip(self.weights, self.weights[1:]):
            if w.shape[1] != w_prev.shape[0]:
                raise InvalidConfig("layer widths do not chain")
        self.adam_m = [np.zeros_like(p) for p in self.parameters()]
        self.adam_v = [np.zeros_like(p) for p in self.parameters()]
        self.step = 0

    @classmethod
    def init(cls, input_dim: int, hidden_width: int = 32, depth: int = 2, seed: int = 0) -> MlpDecoder:
        """Glorot-uniform weights, zero biases, deterministic per seed."""
        if input_dim < 1 or hidden_width < 1 or depth < 0:
            raise InvalidConfig(f"bad decoder shape ({input_dim}, {hidden_width}, {depth})")
        rng = np.random.default_rng(seed)
        widths = [input_dim] + [hidden_width] * depth + [1]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths, widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> list:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        single = phi.ndim == 1
        x = np.atleast_2d(phi)
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected input width {self.input_dim}, got {x.shape[1]}")
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            z = x @ w.T + b
            pre.append(z)
            x = z if i == last else np.maximum(z, 0.0)
        out = x[:, 0]
        cache = ForwardCache(inputs, pre)
        return (float(out[0]) if single else out), cache

    def __call__(self, phi):
        return self.forward(phi)[0]

    def backward(self, cache: ForwardCache, dL_ds):
        """Reverse-mode gradients.

        Returns ``(grads, dL_dphi)`` where ``grads`` parallels
        :meth:`parameters`. Gradients are summed over the batch.
        """
        g = np.asarray(dL_ds, dtype=np.float64).reshape(-1, 1)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (cache.pre[i] > 0.0)
            grads[2 * i] = g.T @ cache.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, g

    def adam_step(self, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, step: int | None = None) -> None:
        """Apply one Adam update; increments the step counter unless ``step`` is given."""
        if step is None:
            self.step += 1
            step = self.step
        for p, g, m, v in zip(self.parameters(), grads, self.adam_m, self.adam_v):
            adam_update(p, g, m, v, step, lr, beta1, beta2, eps)


def init_mlp(input_dim, hidden_width, depth, seed) -> MlpDecoder:
    return MlpDecoder.init(input_dim, hidden_width, depth, seed)
