"""Backpropagation and direct feedback alignment on the same network model.

Both return :class:`~dfclab.plasticity.UpdateBuffer` increments (negative
loss gradients, batch mean) so they plug into the same optimizer step.
"""
from dataclasses import dataclass

import numpy as np

from dfclab.controller import loss_grad
from dfclab.network import forward_pass, phi_prime
from dfclab.plasticity import UpdateBuffer


@dataclass(frozen=True)
class DfaFeedback:
    """Fixed random matrices ``B_i`` of shape ``(n_i, n_L)``, one per hidden layer."""
    matrices: tuple


def init_dfa_feedback(params, rng):
    n_out = params.n_out
    scale = 1.0 / np.sqrt(n_out)
    return DfaFeedback(tuple(rng.normal(0.0, scale, size=(n, n_out)) for n in params.sizes[1:-1]))


def _fill(params, errors, acts, batch):
    buf = UpdateBuffer.zeros_like(params)
    for i, g in enumerate(errors):
        buf.delta_W[i] = g.T @ acts.r[i] / batch
        buf.delta_b[i] = g.sum(axis=0) / batch
    buf.step_count = 1
    return buf


def bp_gradients(params, r0, label, loss):
    """Exact negative loss gradients by reverse-mode differentiation."""
    r0 = np.atleast_2d(r0)
    label = np.atleast_2d(label)
    acts = forward_pass(params, r0)
    L = params.depth
    errors = [None] * L
    # errors[i] = -dLoss/dv_i
    g = -loss_grad(acts.output, label, loss) * phi_prime(params.activations[-1], acts.v[-1])
    errors[-1] = g
    for i in range(L - 2, -1, -1):
        g = (g @ params.weights[i + 1]) * phi_prime(params.activations[i], acts.v[i])
        errors[i] = g
    return _fill(params, errors, acts, r0.shape[0])


def dfa_update(params, feedback, r0, label, loss):
    """Hidden layers get ``D(v_i) B_i delta``; the output layer uses the true error."""
    r0 = np.atleast_2d(r0)
    label = np.atleast_2d(label)
    acts = forward_pass(params, r0)
    delta = -loss_grad(acts.output, label, loss)
    errors = [(delta @ b.T) * phi_prime(params.activations[i], acts.v[i])
              for i, b in enumerate(feedback.matrices)]
    errors.append(delta * phi_prime(params.activations[-1], acts.v[-1]))
    return _fill(params, errors, acts, r0.shape[0])
