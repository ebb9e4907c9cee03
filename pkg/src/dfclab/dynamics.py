"""Time-domain simulation of the coupled network and controller.

All simulators integrate a whole minibatch at once (leading batch axis); the
samples never interact, so results are the same as running them one by one.
Two discretization tweaks are always on:

* layer i's feedforward input at step k+1 uses layer i-1's *new* rate;
* the feedback input at step k+1 uses the freshly updated control signal.

Noise for the feedback phase is drawn from one generator per sample, keyed by
the caller (see :func:`sample_streams`), so batching cannot change results.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from dfclab.controller import ConfigError, ControlGains, ControllerState, controller_step
from dfclab.network import Activations, forward_pass, network_jacobian, phi, split_layers
from dfclab.numerics import SingularMatrixError, eigenvalues
from dfclab.plasticity import UpdateBuffer, forward_increment

DIVERGENCE_BOUND = 1e6


class DivergenceError(FloatingPointError):
    """Simulated state blew up (non-finite or above ``DIVERGENCE_BOUND``)."""

    def __init__(self, step, phase="forward"):
        super().__init__(f"{phase} simulation diverged at step {step}")
        self.step = step
        self.phase = phase


class SamplingError(RuntimeError):
    pass


@dataclass
class SimConfig:
    """Integration constants for both phases.

    Forward phase: ``dt``, ``k_max``, ``tau_v``, ``tau_u``, ``k_p``,
    ``alpha_tilde``. Feedback (noisy) phase: ``dt_fb``, ``t_max_fb``,
    ``tau_v_fb`` (feedback compartment), ``tau_v_noise_phase`` (soma),
    ``sigma``, ``beta``, ``alpha_tilde_fb``, ``k_p_fb``. ``tau_u`` is shared.
    """
    dt: float = 0.02
    k_max: int = 1000
    tau_v: float = 0.2
    tau_u: float = 1.0
    k_p: float = 2.0
    alpha_tilde: float = 0.01
    dt_fb: float = 0.001
    t_max_fb: int = 300
    tau_v_fb: float = 0.3
    tau_v_noise_phase: float = 0.005
    sigma: float = 0.01
    beta: float = 0.01
    alpha_tilde_fb: float = 0.5
    k_p_fb: float = 0.0

    def __post_init__(self):
        for name in ("dt", "tau_v", "tau_u", "dt_fb", "tau_v_fb", "tau_v_noise_phase"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.k_max < 1 or self.t_max_fb < 1:
            raise ConfigError("step counts must be at least 1")
        if self.dt > min(self.tau_v, self.tau_u):
            raise ConfigError(f"dt={self.dt} exceeds min(tau_v, tau_u)")
        if self.dt_fb > min(self.tau_v_fb, self.tau_v_noise_phase):
            raise ConfigError(f"dt_fb={self.dt_fb} exceeds min(tau_v_fb, tau_v_noise_phase)")
        if min(self.sigma, self.beta, self.alpha_tilde, self.alpha_tilde_fb, self.k_p, self.k_p_fb) < 0:
            raise ConfigError("gains, leaks, sigma and beta must be nonnegative")

    @property
    def forward_gains(self):
        return ControlGains(self.k_p, self.alpha_tilde, self.tau_u)

    @property
    def feedback_gains(self):
        return ControlGains(self.k_p_fb, self.alpha_tilde_fb, self.tau_u)


@dataclass
class Trajectory:
    """Recorded states, time-major: ``u[k]`` is the control signal after step k.

    With ``record=False`` only the initial and final snapshots are kept.
    """
    u: list = field(default_factory=list)
    u_int: list = field(default_factory=list)
    v: list = field(default_factory=list)
    v_ff: list = field(default_factory=list)
    v_fb: list = field(default_factory=list)

    def append(self, ctrl, v, v_ff, v_fb):
        self.u.append(ctrl.u.copy())
        self.u_int.append(ctrl.u_int.copy())
        self.v.append([x.copy() for x in v])
        self.v_ff.append([x.copy() for x in v_ff])
        self.v_fb.append([x.copy() for x in v_fb])

    def as_arrays(self):
        """``(u, [v_1, ..., v_L])`` stacked along a leading time axis."""
        u = np.stack(self.u)
        v = [np.stack([snap[i] for snap in self.v]) for i in range(len(self.v[0]))]
        return u, v

    @property
    def final_u(self):
        return self.u[-1]

    @property
    def final_v(self):
        return self.v[-1]


def sample_streams(seed, n, *key):
    """Independent generators for samples ``0..n-1`` under a ``(seed, *key)`` namespace."""
    return [np.random.default_rng([int(seed), *map(int, key), i]) for i in range(n)]


def _promote(r0, target=None):
    r0 = np.asarray(r0, dtype=np.float64)
    single = r0.ndim == 1
    r0 = np.atleast_2d(r0)
    if target is not None:
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        if target.shape[0] != r0.shape[0]:
            raise ConfigError("input and target batch sizes differ")
    return single, r0, target


def _check_finite(step, phase, *arrays):
    for a in arrays:
        # NaN fails the comparison, inf exceeds the bound
        if not np.max(np.abs(a)) <= DIVERGENCE_BOUND:
            raise DivergenceError(step, phase)


def _squeeze_traj(traj, single):
    if not single:
        return traj
    t = Trajectory()
    t.u = [x[0] for x in traj.u]
    t.u_int = [x[0] for x in traj.u_int]
    for name in ("v", "v_ff", "v_fb"):
        setattr(t, name, [[x[0] for x in snap] for snap in getattr(traj, name)])
    return t


def _simulate_forward(params, r0, target, config, record, last_only):
    single, r0, target = _promote(r0, target)
    acts = forward_pass(params, r0)
    L = params.depth
    v = [x.copy() for x in acts.v]
    r = [x.copy() for x in acts.r]
    v_ff = [x.copy() for x in acts.v]
    v_fb = [np.zeros_like(x) for x in v]
    ctrl = ControllerState.zeros(target.shape)
    gains = config.forward_gains
    dt, tau_v = config.dt, config.tau_v
    buf = UpdateBuffer.zeros_like(params)
    traj = Trajectory()
    traj.append(ctrl, v, v_ff, v_fb)

    for k in range(config.k_max):
        e = target - r[-1]
        ctrl = controller_step(ctrl, e, gains, dt)
        last = k == config.k_max - 1
        for i in range(L):
            v_ff[i] = r[i] @ params.weights[i].T + params.biases[i]
            v_fb[i] = ctrl.u @ params.feedback[i].T
            v[i] = v[i] + (dt / tau_v) * (-v[i] + v_ff[i] + v_fb[i])
            r[i + 1] = phi(params.activations[i], v[i])
            if not last_only or last:
                diff = r[i + 1] - phi(params.activations[i], v_ff[i])
                buf.add_forward(i, diff.T @ r[i], diff.sum(axis=0))
        _check_finite(k + 1, "forward", ctrl.u, *v)
        if record or last:
            traj.append(ctrl, v, v_ff, v_fb)

    # sums over steps and samples -> mean
    buf.step_count = (1 if last_only else config.k_max) * r0.shape[0]
    return _squeeze_traj(traj, single), buf.averaged()


def simulate_forward_phase(params, r0, target, config, record=True):
    """Simulate the controlled network and buffer forward updates every step.

    Args:
        params: network parameters (feedback ``Q`` included).
        r0: input, ``(n_0,)`` or ``(B, n_0)``.
        target: output target ``r_L^*`` with matching batch shape.
        config: :class:`SimConfig`; forward-phase fields are used.
        record: keep every snapshot (otherwise only the first and last).

    Returns:
        ``(trajectory, buffer)``; the buffer is averaged over steps and samples.

    Raises:
        DivergenceError: if the state leaves the finite, bounded region.
    """
    return _simulate_forward(params, r0, target, config, record, last_only=False)


def simulate_ss_phase(params, r0, target, config):
    """Same integration as :func:`simulate_forward_phase`; the buffer uses only the last step."""
    return _simulate_forward(params, r0, target, config, False, last_only=True)[1]


@dataclass
class SteadyState:
    """Linearized controlled steady state for a batch (or a single sample)."""
    u: np.ndarray
    dv: list
    v: list
    v_ff: list
    acts: Activations
    acts_ff: Activations
    jacobian: np.ndarray
    delta: np.ndarray
    buffer: UpdateBuffer


def analytic_steady_state(params, r0, target, alpha_tilde):
    """Closed-form controlled steady state and the resulting forward update.

    ``u = (J Q + alpha_tilde I)^{-1} delta``; the voltage offsets ``Q_i u`` are
    injected and propagated by a forward sweep, and the update is formed from
    the wrapped difference ``phi(v) - phi(v_ff)``.

    Raises:
        SingularMatrixError: if ``J Q + alpha_tilde I`` cannot be inverted.
    """
    single, r0b, target = _promote(r0, target)
    acts_ff = forward_pass(params, r0b)
    delta = target - acts_ff.output
    jac = network_jacobian(params, acts_ff)
    q = params.stacked_feedback()
    n_out = params.n_out
    system = jac @ q + alpha_tilde * np.eye(n_out)
    if np.any(np.linalg.cond(system) > 1e14):
        raise SingularMatrixError(
            "analytic_steady_state: J Q + alpha_tilde I is singular; increase alpha_tilde")
    u = np.linalg.solve(system, delta[..., None])[..., 0]
    dv = split_layers(u @ q.T, params.sizes[1:])
    acts = forward_pass(params, r0b, dv=dv)
    v_ff = [a - d for a, d in zip(acts.v, dv)]
    buf = UpdateBuffer.zeros_like(params)
    for i in range(params.depth):
        dw, db = forward_increment(acts.v[i], v_ff[i], acts.r[i], params.activations[i])
        buf.add_forward(i, dw, db)
    buf.step_count = 1
    if single:
        u, delta, jac = u[0], delta[0], jac[0]
        dv = [x[0] for x in dv]
        v_ff = [x[0] for x in v_ff]
        acts = Activations([x[0] for x in acts.v], [x[0] for x in acts.r])
        acts_ff = Activations([x[0] for x in acts_ff.v], [x[0] for x in acts_ff.r])
    return SteadyState(u, dv, acts.v, v_ff, acts, acts_ff, jac, delta, buf)


def solve_fixed_point(params, r0, target, alpha_tilde, u0=None, tol=1e-13):
    """Exact equilibrium of the (noise-free) continuous dynamics for one sample.

    At rest ``v_i = W_i r_{i-1} + b_i + Q_i u`` and the controller satisfies
    ``target - r_L = alpha_tilde u``; this solves that system for ``u``.

    Returns:
        ``(u, dv)`` with ``dv`` the per-layer feedback offsets ``Q_i u``.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sizes = params.sizes[1:]
    q = params.stacked_feedback()

    def residual(u):
        dv = split_layers(q @ u, sizes)
        return target - forward_pass(params, r0, dv=dv).output - alpha_tilde * u

    if u0 is None:
        u0 = analytic_steady_state(params, r0, target, alpha_tilde).u
    sol = optimize.root(residual, u0, method="hybr", tol=tol)
    if not sol.success:
        raise SingularMatrixError(f"fixed-point solve failed: {sol.message}")
    return sol.x, split_layers(q @ sol.x, sizes)


def simulate_feedback_phase(params, r0, config, rng, freeze_output=False, record=False):
    """Noisy feedback-phase simulation; returns ``(trajectory, buffer)`` with ``delta_Q`` filled.

    The output target equals the unperturbed output, so the controller only
    reacts to noise injected into the (low-pass) feedback compartment.

    Args:
        params: network parameters.
        r0: input, ``(n_0,)`` or ``(B, n_0)``.
        config: :class:`SimConfig`; feedback-phase fields are used.
        rng: a ``numpy.random.Generator`` or a list with one per sample.
        freeze_output: no noise in the output layer and no update for ``Q_L``.
        record: keep every snapshot.
    """
    single, r0, _ = _promote(r0)
    B = r0.shape[0]
    acts = forward_pass(params, r0)
    L = params.depth
    sizes = params.sizes[1:]
    n_tot = sum(sizes)
    K = config.t_max_fb
    if isinstance(rng, np.random.Generator):
        noise = rng.standard_normal((B, K, n_tot))
    else:
        if len(rng) != B:
            raise ConfigError(f"need one noise stream per sample ({B}), got {len(rng)}")
        noise = np.stack([g.standard_normal((K, n_tot)) for g in rng])
    noise = [np.ascontiguousarray(x) for x in split_layers(noise, sizes)]
    if freeze_output:
        noise[-1] = np.zeros_like(noise[-1])

    target = acts.output.copy()
    v = [x.copy() for x in acts.v]
    r = [x.copy() for x in acts.r]
    v_ff = [x.copy() for x in acts.v]
    v_fb = [np.zeros_like(x) for x in v]
    ctrl = ControllerState.zeros(target.shape)
    gains = config.feedback_gains
    dt, tau_v, tau_fb = config.dt_fb, config.tau_v_noise_phase, config.tau_v_fb
    noise_gain = np.sqrt(dt) / tau_fb * config.sigma
    dq = [np.zeros_like(x) for x in params.feedback]
    traj = Trajectory()
    traj.append(ctrl, v, v_ff, v_fb)

    for k in range(K):
        e = target - r[-1]
        ctrl = controller_step(ctrl, e, gains, dt)
        for i in range(L):
            v_ff[i] = r[i] @ params.weights[i].T + params.biases[i]
            v_fb_old = v_fb[i]
            v_fb[i] = (v_fb_old + (dt / tau_fb) * (-v_fb_old + ctrl.u @ params.feedback[i].T)
                       + noise_gain * noise[i][:, k])
            v[i] = v[i] + (dt / tau_v) * (-v[i] + v_ff[i] + v_fb[i])
            r[i + 1] = phi(params.activations[i], v[i])
            dq[i] -= v_fb_old.T @ ctrl.u
        _check_finite(k + 1, "feedback", ctrl.u, *v)
        if record or k == K - 1:
            traj.append(ctrl, v, v_ff, v_fb)

    buf = UpdateBuffer.zeros_like(params)
    # anti-Hebbian term averaged over steps and samples, plus the constant decay
    buf.delta_Q = [x / (K * B) - config.beta * q for x, q in zip(dq, params.feedback)]
    if freeze_output:
        buf.delta_Q[-1] = np.zeros_like(buf.delta_Q[-1])
    buf.step_count = 1
    return _squeeze_traj(traj, single), buf


def sample_admissible_feedback(jac, rng, max_tries=100, spread=None):
    """Random ``Q = J^T M`` with every eigenvalue of ``J Q`` in the open right half-plane.

    ``M = (J J^T)^{-1} S`` where ``S`` is the identity plus Gaussian noise of
    scale ``spread`` (default ``0.5 / sqrt(n_L)``), so ``J Q = S``. The result
    is scaled to unit Frobenius norm.

    Raises:
        SamplingError: if no admissible sample is found within ``max_tries``.
    """
    jac = np.asarray(jac, dtype=np.float64)
    n = jac.shape[0]
    if spread is None:
        spread = 0.5 / np.sqrt(n)
    gram = jac @ jac.T
    if np.linalg.matrix_rank(gram) < n:
        raise SingularMatrixError("sample_admissible_feedback: J is rank deficient")
    for _ in range(max_tries):
        s = np.eye(n) + spread * rng.standard_normal((n, n))
        if np.min(eigenvalues(s).real) <= 0:
            continue
        q = jac.T @ np.linalg.solve(gram, s)
        return q / np.linalg.norm(q)
    raise SamplingError(f"no admissible feedback found in {max_tries} draws")
