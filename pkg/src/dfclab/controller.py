"""Output targets and the leaky PI controller.

Only the form with leakage on the total control signal ``u`` is provided; its
leak constant is called ``alpha_tilde`` throughout.
"""
from dataclasses import dataclass

import numpy as np

LOSSES = ("squared_error", "cross_entropy_softmax")


class ConfigError(ValueError):
    """Invalid configuration value (unknown enum, out-of-range constant, ...)."""


def _check_loss(kind):
    if kind not in LOSSES:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSSES}")


def softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_value(r, y, kind):
    """Per-sample loss. ``squared_error`` is ``||r - y||^2`` (summed, not averaged)."""
    _check_loss(kind)
    r = np.asarray(r, dtype=np.float64)
    if kind == "squared_error":
        return np.sum((r - y) ** 2, axis=-1)
    z = r - np.max(r, axis=-1, keepdims=True)
    log_p = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    return -np.sum(y * log_p, axis=-1)


def loss_grad(r, y, kind):
    """Analytic gradient of :func:`loss_value` with respect to the output ``r``."""
    _check_loss(kind)
    r = np.asarray(r, dtype=np.float64)
    if kind == "squared_error":
        return 2.0 * (r - y)
    return softmax(r) - y


def compute_target(r_out, label, lam, loss="squared_error"):
    """Nudge the feedforward output down the loss gradient.

    Args:
        r_out: feedforward output ``r_L^-``, shape ``(n_L,)`` or ``(B, n_L)``.
        label: regression target or one-hot class label, same shape.
        lam: target stepsize, nonnegative.
        loss: ``"squared_error"`` or ``"cross_entropy_softmax"``.

    Returns:
        ``(target, delta)`` with ``delta = target - r_out``.
    """
    if lam < 0:
        raise ConfigError(f"target stepsize must be nonnegative, got {lam}")
    r_out = np.asarray(r_out, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if label.shape[-1] != r_out.shape[-1]:
        raise ConfigError(f"label width {label.shape[-1]} != output width {r_out.shape[-1]}")
    delta = -lam * loss_grad(r_out, label, loss)
    return r_out + delta, delta


@dataclass
class ControlGains:
    k_p: float
    alpha_tilde: float
    tau_u: float

    def __post_init__(self):
        if self.tau_u <= 0:
            raise ConfigError(f"tau_u must be positive, got {self.tau_u}")
        if self.k_p < 0 or self.alpha_tilde < 0:
            raise ConfigError("k_p and alpha_tilde must be nonnegative")


@dataclass
class ControllerState:
    u: np.ndarray
    u_int: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


def controller_step(state, e, gains, dt):
    """One Euler step of the leaky PI controller (proactive form).

    The integral part leaks in proportion to the previous total signal ``u``;
    the same error ``e`` feeds both the integral update and the proportional
    term of the new ``u``.
    """
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    u_int = state.u_int + (dt / gains.tau_u) * (e - gains.alpha_tilde * state.u)
    return ControllerState(u_int + gains.k_p * e, u_int)
