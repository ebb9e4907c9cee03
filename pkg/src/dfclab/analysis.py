"""Alignment ratios, oracle updates and stability diagnostics.

Oracle updates are flat vectors in the column-major weight order used by
:mod:`dfclab.network`. Where an ``R`` argument is accepted it may be either
the dense matrix from :func:`dfclab.network.r_matrix` or an
:class:`~dfclab.network.Activations` instance; the latter applies ``R``
implicitly, which avoids forming a huge matrix for wide layers.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from dfclab.controller import compute_target, loss_value
from dfclab.dynamics import analytic_steady_state
from dfclab.network import (Activations, forward_pass, layer_jacobians, network_jacobian,
                            outer_flat, phi_prime, split_layers)
from dfclab.numerics import (DegenerateInputError, SingularMatrixError, angle_degrees,
                             as_matrix, damped_pinv, eigenvalues, rowspace_projector)


def con2_ratio(q, jac):
    """Fraction of ``Q``'s Frobenius norm lying in the row space of ``J``."""
    q = as_matrix(q)
    nq = np.linalg.norm(q)
    if nq == 0:
        raise DegenerateInputError("con2_ratio: Q is zero")
    return float(np.linalg.norm(rowspace_projector(jac) @ q) / nq)


def con1_ratio(acts):
    """Spread of the non-output layer norms: population std divided by mean.

    ``acts.r[0..L-1]`` are used. For a batch the per-sample ratios are averaged.
    """
    rs = acts.r[:-1]
    norms = np.stack([np.linalg.norm(np.atleast_2d(r), axis=-1) for r in rs], axis=-1)
    mean = norms.mean(axis=-1)
    if np.any(mean == 0):
        raise DegenerateInputError("con1_ratio: all layer norms are zero")
    return float(np.mean(norms.std(axis=-1) / mean))


def _apply_r(r_like, x):
    if isinstance(r_like, Activations):
        sizes = [np.shape(v)[-1] for v in r_like.v]
        return outer_flat(split_layers(x, sizes), r_like.r[:-1])
    return as_matrix(r_like) @ x


def oracle_mn_update(jac, r_like, delta, gamma):
    """Damped minimum-norm update ``R J^T (J J^T + gamma I)^{-1} delta``."""
    return _apply_r(r_like, damped_pinv(jac, gamma) @ np.asarray(delta, dtype=np.float64))


def oracle_gn_update(jac_w, delta, gamma):
    """Damped Gauss-Newton update ``J_W^T (J_W J_W^T + gamma I)^{-1} delta``."""
    return damped_pinv(jac_w, gamma) @ np.asarray(delta, dtype=np.float64)


def oracle_gn_update_structured(params, acts, delta, gamma):
    """Same as :func:`oracle_gn_update` without forming ``J_W``.

    Uses ``J_W J_W^T = sum_i ||r_{i-1}||^2 J_i J_i^T`` and ``J_W^T = R J^T``.
    """
    blocks = layer_jacobians(params, acts)
    gram = sum(float(np.dot(r, r)) * (b @ b.T) for b, r in zip(blocks, acts.r[:-1]))
    gram = gram + gamma * np.eye(gram.shape[0])
    try:
        x = np.linalg.solve(gram, delta)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("oracle_gn_update: J_W J_W^T + gamma I is singular") from exc
    return _apply_r(acts, np.concatenate(blocks, axis=-1).T @ x)


def oracle_bp_update(jac_w, delta):
    """Gradient-descent direction ``J_W^T delta``."""
    return as_matrix(jac_w).T @ np.asarray(delta, dtype=np.float64)


def oracle_ssa_update(jac, q, r_ss, delta, alpha_tilde):
    """Linearized steady-state update ``R_ss Q (J Q + alpha_tilde I)^{-1} delta``."""
    jac, q = as_matrix(jac), as_matrix(q)
    system = jac @ q + alpha_tilde * np.eye(jac.shape[0])
    try:
        u = np.linalg.solve(system, delta)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("oracle_ssa_update: J Q + alpha_tilde I is singular") from exc
    return _apply_r(r_ss, q @ u)


def j_hat(params, v_layers):
    """Block-subdiagonal matrix with blocks ``W_{i+1} D(v_i)`` (single sample)."""
    sizes = params.sizes[1:]
    n = sum(sizes)
    out = np.zeros((n, n))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for i in range(params.depth - 1):
        d = phi_prime(params.activations[i], v_layers[i])
        out[offs[i + 1]:offs[i + 2], offs[i]:offs[i + 1]] = params.weights[i + 1] * d
    return out


def a_pi_matrix(params, steady_state, config):
    """Linearized system matrix of the coupled network and controller.

    State is ``(v - v_ff, u)`` around the controlled steady state. The
    controller leaks on ``u`` directly, so its effective time constant is
    ``config.tau_u`` itself.

    Args:
        params: network parameters.
        steady_state: single-sample :class:`~dfclab.dynamics.SteadyState`.
        config: :class:`~dfclab.dynamics.SimConfig` (forward-phase fields).
    """
    v = steady_state.v
    jh = j_hat(params, v)
    jss = network_jacobian(params, steady_state.acts)
    q = params.stacked_feedback()
    n, m = jh.shape[0], q.shape[1]
    eye_n, eye_m = np.eye(n), np.eye(m)
    tv, tu, kp, a = config.tau_v, config.tau_u, config.k_p, config.alpha_tilde
    top = np.hstack([-(eye_n - jh) / tv, (eye_n - jh) @ q / tv])
    bottom = np.hstack([jss @ ((kp / tv - 1.0 / tu) * eye_n - (kp / tv) * jh),
                        -(kp / tv) * jss @ (eye_n - jh) @ q - (a / tu) * eye_m])
    return np.vstack([top, bottom])


def condition3_check(jac_ss, q, alpha):
    """Do all eigenvalues of ``J_ss Q`` have real part above ``-alpha``?

    Returns:
        ``(verdict, margin)`` with ``margin = min Re eig(J_ss Q) + alpha``.
    """
    margin = float(np.min(eigenvalues(as_matrix(jac_ss) @ as_matrix(q)).real) + alpha)
    return margin > 0, margin


def descent_check(update_vec, bp_vec):
    """Inner product between an update and the gradient-descent direction."""
    return float(np.dot(np.ravel(update_vec), np.ravel(bp_vec)))


@dataclass
class DiagnosticsRecord:
    """One metrics row. ``None`` marks a quantity that is undefined."""
    phase: str = "train"
    epoch: int = 0
    iteration: int = 0
    train_loss: float = None
    val_loss: float = None
    val_acc: float = None
    con1_ratio: float = None
    con2_ratio: float = None
    angle_mn_deg: float = None
    angle_gn_deg: float = None
    angle_bp_deg: float = None
    angle_ssa_deg: float = None
    max_real_eig_api: float = None
    max_real_eig_jq: float = None

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return [_fmt(x) for x in asdict(self).values()]


def _fmt(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _safe_angle(a, b):
    try:
        return angle_degrees(a, b)
    except DegenerateInputError:
        return None


def _safe(fn):
    try:
        return fn()
    except (SingularMatrixError, DegenerateInputError):
        return None


def batch_diagnostics(params, r0, label, lam, loss, config, update_flat, gamma=0.1,
                      with_stability=True):
    """Alignment and stability quantities for a minibatch.

    Oracle updates are averaged over samples, like the buffered updates they
    are compared with. Ratios are averaged; eigenvalue measures take the worst
    (largest) sample.

    Args:
        params: network parameters.
        r0: inputs ``(B, n_0)``.
        label: targets ``(B, n_L)``.
        lam: target stepsize.
        loss: loss kind.
        config: :class:`~dfclab.dynamics.SimConfig` for leak, gains and time constants.
        update_flat: the method's own (batch-averaged) flat weight update.
        gamma: damping of the MN/GN oracles.
        with_stability: also compute the eigenvalue measures.

    Returns:
        A partially filled :class:`DiagnosticsRecord`.
    """
    r0 = np.atleast_2d(r0)
    label = np.atleast_2d(label)
    acts = forward_pass(params, r0)
    _, delta = compute_target(acts.output, label, lam, loss)
    q = params.stacked_feedback()
    rec = DiagnosticsRecord()
    rec.train_loss = float(np.mean(loss_value(acts.output, label, loss)))
    rec.con1_ratio = _safe(lambda: con1_ratio(acts))

    mn = gn = bp = ssa = 0.0
    con2, eig_api, eig_jq = [], [], []
    B = r0.shape[0]
    for b in range(B):
        a_b = Activations([v[b] for v in acts.v], [r[b] for r in acts.r])
        jac = network_jacobian(params, a_b)
        d = delta[b]
        mn = mn + oracle_mn_update(jac, a_b, d, gamma)
        gn = gn + oracle_gn_update_structured(params, a_b, d, gamma)
        bp = bp + _apply_r(a_b, jac.T @ d)
        ss = _safe(lambda: analytic_steady_state(params, r0[b], acts.output[b] + d,
                                                 config.alpha_tilde))
        if ss is not None:
            ssa = ssa + oracle_ssa_update(ss.jacobian, q, ss.acts, d, config.alpha_tilde)
        c2 = _safe(lambda: con2_ratio(q, jac))
        if c2 is not None:
            con2.append(c2)
        if with_stability and ss is not None:
            jss = network_jacobian(params, ss.acts)
            eig_jq.append(float(np.max(eigenvalues(-(jss @ q) - config.alpha_tilde * np.eye(q.shape[1])).real)))
            eig_api.append(float(np.max(eigenvalues(a_pi_matrix(params, ss, config)).real)))

    rec.con2_ratio = float(np.mean(con2)) if con2 else None
    upd = np.ravel(update_flat)
    rec.angle_mn_deg = _safe_angle(upd, mn / B)
    rec.angle_gn_deg = _safe_angle(upd, gn / B)
    rec.angle_bp_deg = _safe_angle(upd, bp / B)
    rec.angle_ssa_deg = _safe_angle(upd, ssa / B) if np.ndim(ssa) else None
    if eig_api:
        rec.max_real_eig_api = max(eig_api)
        rec.max_real_eig_jq = max(eig_jq)
    return rec
