"""Local weight increments, update buffers and the SGD/Adam step.

Buffers hold increments that are meant to be *added* (after scaling by a
learning rate). Optimizers therefore see the gradient-like quantity
``g = -increment``.

Increment functions accept a single sample or a batch (leading axis) and
return the batch mean.
"""
from dataclasses import dataclass, field

import numpy as np

from dfclab.network import phi
from dfclab.numerics import ShapeError


def _batch_outer_mean(a, b):
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return a.T @ b / a.shape[0]


def _batch_mean(a):
    a = np.atleast_2d(a)
    return a.mean(axis=0)


def forward_increment(v, v_ff, r_prev, activation):
    """Hebbian-style increment ``(phi(v) - phi(v_ff)) r_prev^T`` and its bias part."""
    diff = phi(activation, v) - phi(activation, v_ff)
    return _batch_outer_mean(diff, r_prev), _batch_mean(diff)


def feedback_increment(v_fb, u, beta, q):
    """Anti-Hebbian feedback increment ``-v_fb u^T - beta Q`` (batch mean)."""
    return -_batch_outer_mean(v_fb, u) - beta * q


def steady_state_update(v_ss, v_ff_ss, r_prev_ss, activation, eta=1.0):
    """Steady-state increments in both forms.

    Returns:
        ``(linear, wrapped)``, each a ``(dW, db)`` pair. ``linear`` uses the raw
        voltage difference scaled by ``eta``; ``wrapped`` passes both voltages
        through the activation first (unscaled), as the trainer uses.
    """
    diff = np.asarray(v_ss) - np.asarray(v_ff_ss)
    linear = (eta * _batch_outer_mean(diff, r_prev_ss), eta * _batch_mean(diff))
    wrapped = forward_increment(v_ss, v_ff_ss, r_prev_ss, activation)
    return linear, wrapped


def layerwise_rate_scales(r_layers):
    """Per-layer factors ``1 / ||r_{i-1}||^2`` from feedforward activations.

    ``r_layers`` is the list ``[r_0, ..., r_{L-1}]`` for a single sample.
    """
    out = []
    for r in r_layers:
        n2 = float(np.dot(r, r))
        out.append(0.0 if n2 == 0 else 1.0 / n2)
    return out


@dataclass
class UpdateBuffer:
    """Accumulated increments for one parameter set."""
    delta_W: list
    delta_b: list
    delta_Q: list
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   [np.zeros_like(q) for q in params.feedback], 0)

    def add_forward(self, i, dw, db):
        self.delta_W[i] += dw
        self.delta_b[i] += db

    def scaled(self, s):
        return UpdateBuffer([s * w for w in self.delta_W], [s * b for b in self.delta_b],
                            [s * q for q in self.delta_Q], self.step_count)

    def averaged(self):
        """Divide by ``step_count`` (no-op when it is zero)."""
        if self.step_count == 0:
            return self
        out = self.scaled(1.0 / self.step_count)
        out.step_count = 1
        return out

    def scale_layers(self, scales):
        """Multiply layer i's forward increments by ``scales[i]`` in place."""
        for i, s in enumerate(scales):
            self.delta_W[i] = self.delta_W[i] * s
            self.delta_b[i] = self.delta_b[i] * s
        return self

    def flat_weights(self):
        """Column-major concatenation of the weight increments (no biases)."""
        return np.concatenate([w.ravel(order="F") for w in self.delta_W])

    def __add__(self, other):
        return UpdateBuffer([a + b for a, b in zip(self.delta_W, other.delta_W)],
                            [a + b for a, b in zip(self.delta_b, other.delta_b)],
                            [a + b for a, b in zip(self.delta_Q, other.delta_Q)],
                            self.step_count + other.step_count)


@dataclass
class OptimizerState:
    """SGD or Adam state for one parameter group (``forward`` or ``feedback``).

    ``frozen`` lists layer indices that never move (used to pin the output
    feedback matrix).
    """
    kind: str = "sgd"
    lr: float = 0.01
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float = None
    group: str = "forward"
    frozen: tuple = ()
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.group not in ("forward", "feedback"):
            raise ValueError(f"unknown parameter group {self.group!r}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def _group_tensors(params, buffer, group):
    if group == "forward":
        return params.weights + params.biases, buffer.delta_W + buffer.delta_b
    return params.feedback, buffer.delta_Q


def apply_update(params, buffer, opt):
    """Take one optimizer step and return new parameters (input left untouched).

    ``opt`` is updated in place (moments and step counter).
    """
    theta, inc = _group_tensors(params, buffer, opt.group)
    L = params.depth
    if len(theta) != len(inc) or any(t.shape != d.shape for t, d in zip(theta, inc)):
        raise ShapeError("update buffer does not match parameter shapes")
    grads = [-np.asarray(d, dtype=np.float64) for d in inc]
    for k in opt.frozen:
        grads[k] = np.zeros_like(grads[k])
        if opt.group == "forward":
            grads[L + k] = np.zeros_like(grads[L + k])
    if opt.clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > opt.clip:
            grads = [g * (opt.clip / norm) for g in grads]

    opt.step += 1
    if opt.kind == "sgd":
        new = [t - opt.lr * g for t, g in zip(theta, grads)]
    else:
        if not opt.m:
            opt.m = [np.zeros_like(t) for t in theta]
            opt.v = [np.zeros_like(t) for t in theta]
        c1 = 1.0 - opt.beta1 ** opt.step
        c2 = 1.0 - opt.beta2 ** opt.step
        new = []
        for k, (t, g) in enumerate(zip(theta, grads)):
            opt.m[k] = opt.beta1 * opt.m[k] + (1 - opt.beta1) * g
            opt.v[k] = opt.beta2 * opt.v[k] + (1 - opt.beta2) * g * g
            new.append(t - opt.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps))

    out = params.copy()
    if opt.group == "forward":
        out.weights, out.biases = new[:L], new[L:]
    else:
        out.feedback = new
    return out
