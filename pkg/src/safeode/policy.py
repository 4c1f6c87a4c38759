"""Controller network and learnable class-K coefficients.

The controller is a fully-connected net with tanh hidden layers and a
linear output, stored as one flat parameter vector so the optimizer and the
adjoint accumulators can treat it as a plain array.  Derivatives (input
Jacobian and parameter VJP) are hand-rolled reverse mode; tanh keeps them
smooth, which the backward ODE integration relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def _layout(layer_dims):
    """(offset, shape) pairs for W0, b0, W1, b1, ... in the flat vector."""
    spans = []
    off = 0
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        spans.append((off, (d_out, d_in)))
        off += d_out * d_in
        spans.append((off, (d_out,)))
        off += d_out
    return spans, off


def param_count(layer_dims) -> int:
    return _layout(layer_dims)[1]


@dataclass
class MlpPolicy:
    """u_nn = pi(x; theta1): tanh hidden layers, identity output."""

    layer_dims: tuple
    theta1: np.ndarray

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.theta1 = np.asarray(self.theta1, dtype=float)
        spans, total = _layout(self.layer_dims)
        if self.theta1.size != total:
            raise ValueError(
                f"theta1 has {self.theta1.size} entries, layout needs {total}"
            )
        self._spans = spans

    @classmethod
    def init_random(cls, layer_dims, seed=0, output_scale=1.0):
        """Uniform +-1/sqrt(fan_in) init, reproducible from the seed.

        output_scale shrinks the final layer; stiff plants (the car chain)
        need near-zero initial controls or the first rollouts leave the
        region where the safety filter is well-behaved under Euler steps.
        """
        rng = np.random.default_rng(seed)
        parts = []
        n_layers = len(layer_dims) - 1
        for li, (d_in, d_out) in enumerate(zip(layer_dims[:-1],
                                               layer_dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            if li == n_layers - 1:
                bound *= output_scale
            parts.append(rng.uniform(-bound, bound, size=d_out * d_in))
            parts.append(rng.uniform(-bound, bound, size=d_out))
        return cls(tuple(layer_dims), np.concatenate(parts))

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def _weights(self):
        out = []
        for (w_off, w_shape), (b_off, b_shape) in zip(
            self._spans[0::2], self._spans[1::2]
        ):
            W = self.theta1[w_off:w_off + w_shape[0] * w_shape[1]].reshape(w_shape)
            b = self.theta1[b_off:b_off + b_shape[0]]
            out.append((W, b))
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        layers = self._weights()
        a = x
        for W, b in layers[:-1]:
            a = np.tanh(W @ a + b)
        W, b = layers[-1]
        return W @ a + b

    def _forward_trace(self, x):
        """Activations per layer; index 0 is the input itself."""
        acts = [np.asarray(x, dtype=float)]
        layers = self._weights()
        for W, b in layers[:-1]:
            acts.append(np.tanh(W @ acts[-1] + b))
        W, b = layers[-1]
        acts.append(W @ acts[-1] + b)
        return acts

    def jacobian_x(self, x):
        """d pi / d x, shape (output_dim, input_dim)."""
        layers = self._weights()
        acts = self._forward_trace(x)
        J = np.eye(self.input_dim)
        for i, (W, _) in enumerate(layers[:-1]):
            J = W @ J
            J = (1.0 - acts[i + 1] ** 2)[:, None] * J
        return layers[-1][0] @ J

    def grad_theta(self, x, cotangent):
        """cotangent' * (d pi / d theta1) as a flat vector."""
        return self.backward(x, cotangent)[0]

    def backward(self, x, cotangent):
        """One reverse sweep: (cotangent' dpi/dtheta1, cotangent' dpi/dx)."""
        cotangent = np.asarray(cotangent, dtype=float)
        layers = self._weights()
        acts = self._forward_trace(x)
        grad = np.zeros_like(self.theta1)
        delta = cotangent
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w_off, w_shape = self._spans[2 * i]
            b_off, _ = self._spans[2 * i + 1]
            grad[w_off:w_off + W.size] = np.outer(delta, acts[i]).ravel()
            grad[b_off:b_off + delta.size] = delta
            if i > 0:
                delta = (W.T @ delta) * (1.0 - acts[i] ** 2)
            else:
                delta = W.T @ delta
        return grad, delta


@dataclass
class ClassKParams:
    """Linear class-K coefficients, one per scalar constraint row.

    kappa(i) = exp(theta2[i]) keeps every coefficient strictly positive
    under unconstrained gradient steps; theta2 = 0 means kappa = 1.
    """

    theta2: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.theta2 = np.atleast_1d(np.asarray(self.theta2, dtype=float))

    @classmethod
    def from_kappa(cls, kappas):
        return cls(np.log(np.asarray(kappas, dtype=float)))

    def kappa(self, i: int) -> float:
        return float(np.exp(self.theta2[i]))

    def kappas(self):
        return np.exp(self.theta2)


def class_k_apply(ck: ClassKParams, i: int, B_val: float) -> float:
    """alpha_i(B) = kappa_i * B; strictly increasing and zero at zero."""
    return ck.kappa(i) * float(B_val)


def class_k_dtheta(ck: ClassKParams, i: int, B_val: float) -> float:
    """d alpha_i / d theta2_i = kappa_i * B (exp reparameterization)."""
    return ck.kappa(i) * float(B_val)


def save_checkpoint(path, policy: MlpPolicy, class_k: ClassKParams, seed=0,
                    extra=None):
    """Flat-parameter checkpoint with a JSON header."""
    payload = {
        "layer_dims": list(policy.layer_dims),
        "theta2_length": int(class_k.theta2.size),
        "seed": int(seed),
        "theta1": [float(v) for v in policy.theta1],
        "theta2": [float(v) for v in class_k.theta2],
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (policy, class_k, header dict)."""
    with open(path) as fh:
        payload = json.load(fh)
    policy = MlpPolicy(tuple(payload["layer_dims"]),
                       np.asarray(payload["theta1"], dtype=float))
    class_k = ClassKParams(np.asarray(payload["theta2"], dtype=float))
    if class_k.theta2.size != payload["theta2_length"]:
        raise ValueError("checkpoint theta2 length mismatch")
    return policy, class_k, payload
