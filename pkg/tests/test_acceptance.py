"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in pytest's terminal
summary, then asserts. Slow criteria (feedback learning, toy regression,
MNIST) take minutes.
"""
import dataclasses
import os
import time

import numpy as np
import pytest

from dfclab.analysis import (a_pi_matrix, con2_ratio, condition3_check, oracle_gn_update)
from dfclab.controller import compute_target
from dfclab.dynamics import (DivergenceError, SimConfig, analytic_steady_state,
                             sample_admissible_feedback, sample_streams, simulate_feedback_phase,
                             simulate_forward_phase, solve_fixed_point)
from dfclab.network import (forward_pass, init_params, make_params, network_jacobian, outer_flat,
                            weight_jacobian)
from dfclab.numerics import angle_degrees, damped_pinv, eigenvalues
from dfclab.plasticity import OptimizerState, apply_update, layerwise_rate_scales, steady_state_update
from tests.conftest import record_criterion


def _check(number, title, ok, detail):
    record_criterion(number, title, bool(ok), detail)
    assert ok, detail


def _random_sizes(rng, bounds):
    return [int(rng.integers(2 if k < len(bounds) - 1 else 1, b + 1)) for k, b in enumerate(bounds)]


def _linear_net(sizes, rng):
    return init_params(sizes, ["linear"] * (len(sizes) - 1), rng)


def _rescale_feedback(params, jac, low):
    """Scale Q so that the smallest real eigenvalue of J Q equals ``low``."""
    q = params.stacked_feedback()
    return params.with_feedback(q * (low / np.min(eigenvalues(jac @ q).real)))


# 1 -----------------------------------------------------------------------------------------
def test_criterion_01_simulated_steady_state_matches_closed_form():
    t0 = time.time()
    cfg = SimConfig(dt=0.005, k_max=5000, tau_v=0.2, tau_u=1.0, k_p=1.5, alpha_tilde=1e-4)
    worst_u = worst_dv = 0.0
    for seed in range(10):
        rng = np.random.default_rng([1, seed])
        sizes = _random_sizes(rng, [6, 5, 4, 3])
        p = _linear_net(sizes, rng)
        r0 = rng.uniform(-1, 1, sizes[0])
        jac = network_jacobian(p, forward_pass(p, r0))
        p = p.with_feedback(sample_admissible_feedback(jac, rng))
        p = _rescale_feedback(p, jac, 2.0)
        target, _ = compute_target(forward_pass(p, r0).output, rng.uniform(-1, 1, sizes[-1]), 1e-3)
        traj, _ = simulate_forward_phase(p, r0, target, cfg, record=False)
        ss = analytic_steady_state(p, r0, target, cfg.alpha_tilde)
        dv_sim = np.concatenate([v - vf for v, vf in zip(traj.final_v, traj.v_ff[-1])])
        dv_ss = np.concatenate(ss.dv)
        worst_u = max(worst_u, np.linalg.norm(traj.final_u - ss.u) / np.linalg.norm(ss.u))
        worst_dv = max(worst_dv, np.linalg.norm(dv_sim - dv_ss) / np.linalg.norm(dv_ss))
    elapsed = time.time() - t0
    _check(1, "steady-state fidelity", max(worst_u, worst_dv) < 1e-4 and elapsed < 10,
           f"max rel err u={worst_u:.2e}, dv={worst_dv:.2e} (tol 1e-4), {elapsed:.1f}s (limit 10s)")


# 2 -----------------------------------------------------------------------------------------
def _ssa_linear_update(p, r0, target, alpha, eta=None):
    """Flat DFC-SSA update in the raw voltage-difference form, optional per-layer rates."""
    ss = analytic_steady_state(p, r0, target, alpha)
    parts = []
    for i in range(p.depth):
        (dw, _), _ = steady_state_update(ss.v[i], ss.v_ff[i], ss.acts.r[i], p.activations[i],
                                         1.0 if eta is None else eta[i])
        parts.append(dw.ravel(order="F"))
    return np.concatenate(parts), ss


def test_criterion_02_equal_norm_network_gives_gauss_newton_direction():
    t0 = time.time()
    angles = []
    for seed in range(10):
        rng = np.random.default_rng([2, seed])
        n, n_out, depth = int(rng.integers(3, 7)), int(rng.integers(1, 3)), int(rng.integers(2, 4))
        # orthogonal hidden blocks keep every layer's norm equal to the input norm
        ws = [np.linalg.qr(rng.standard_normal((n, n)))[0] for _ in range(depth - 1)]
        ws.append(rng.standard_normal((n_out, n)))
        p = make_params(ws)
        r0 = rng.standard_normal(n)
        acts = forward_pass(p, r0)
        jac = network_jacobian(p, acts)
        p = p.with_feedback(sample_admissible_feedback(jac, rng))
        lam = 1e-6
        target, delta = compute_target(acts.output, rng.standard_normal(n_out), lam)
        r2 = float(r0 @ r0)
        upd, _ = _ssa_linear_update(p, r0, target, 1e-8, [1.0 / (2 * lam * r2)] * depth)
        gn = oracle_gn_update(weight_jacobian(p, acts), delta, 0.0)
        angles.append(angle_degrees(upd, gn))
    elapsed = time.time() - t0
    _check(2, "Gauss-Newton alignment", max(angles) < 0.1 and elapsed < 5,
           f"max angle {max(angles):.2e} deg over 10 seeds (tol 0.1), {elapsed:.1f}s (limit 5s)")


# 3 -----------------------------------------------------------------------------------------
def _kkt_min_norm(jac_w, weights, delta):
    """Solve min x^T diag(weights) x s.t. J_W x = delta through its KKT system."""
    n, m = jac_w.shape[1], jac_w.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2 * np.diag(weights)
    kkt[:n, n:] = -jac_w.T
    kkt[n:, :n] = jac_w
    rhs = np.concatenate([np.zeros(n), delta])
    return np.linalg.solve(kkt, rhs)[:n]


def test_criterion_03_layerwise_rates_give_minimum_norm_update():
    worst_closed = worst_kkt = 0.0
    for seed in range(10):
        rng = np.random.default_rng([3, seed])
        sizes = _random_sizes(rng, [6, 5, 4, 3])
        p = _linear_net(sizes, rng)
        r0 = rng.uniform(-1, 1, sizes[0])
        acts = forward_pass(p, r0)
        jac = network_jacobian(p, acts)
        p = p.with_feedback(sample_admissible_feedback(jac, rng))
        target, delta = compute_target(acts.output, rng.uniform(-1, 1, sizes[-1]), 1e-8)
        eta = layerwise_rate_scales(acts.r[:-1])
        upd, _ = _ssa_linear_update(p, r0, target, 1e-10, eta)
        dv = np.split(damped_pinv(jac, 0.0) @ delta, np.cumsum(sizes[1:])[:-1])
        closed = outer_flat(dv, acts.r[:-1], eta)
        weights = np.concatenate([np.full(len(r) * n, r @ r) for r, n in zip(acts.r[:-1], sizes[1:])])
        kkt = _kkt_min_norm(weight_jacobian(p, acts), weights, delta)
        worst_closed = max(worst_closed, np.linalg.norm(upd - closed) / np.linalg.norm(closed))
        worst_kkt = max(worst_kkt, np.linalg.norm(upd - kkt) / np.linalg.norm(kkt))
    _check(3, "minimum-norm solution", max(worst_closed, worst_kkt) < 1e-6,
           f"max rel err vs closed form {worst_closed:.2e}, vs KKT oracle {worst_kkt:.2e} (tol 1e-6)")


# 4 -----------------------------------------------------------------------------------------
def test_criterion_04_updates_are_descent_directions():
    alpha, lam = 1e-3, 1e-4
    positive, smallest = 0, np.inf
    for seed in range(100):
        rng = np.random.default_rng([4, seed])
        sizes = _random_sizes(rng, [8, 7, 6, 3])
        kinds = ["tanh"] * (len(sizes) - 2) + ["linear"] if seed % 2 else ["linear"] * (len(sizes) - 1)
        p = init_params(sizes, kinds, rng)
        r0 = rng.uniform(-1, 1, sizes[0])
        acts = forward_pass(p, r0)
        jac = network_jacobian(p, acts)
        for _ in range(1000):  # arbitrary Gaussian Q, kept only if the controlled system is stable
            q = rng.standard_normal((sum(sizes[1:]), sizes[-1]))
            if condition3_check(jac, q, 0.0)[0]:
                break
        p = p.with_feedback(q)
        target, delta = compute_target(acts.output, rng.uniform(-1, 1, sizes[-1]), lam)
        upd, _ = _ssa_linear_update(p, r0, target, alpha, layerwise_rate_scales(acts.r[:-1]))
        bp = weight_jacobian(p, acts).T @ delta
        ip = float(upd @ bp) / (np.linalg.norm(upd) * np.linalg.norm(bp))
        smallest = min(smallest, ip)
        positive += ip > 0
    _check(4, "descent direction", positive == 100,
           f"{positive}/100 positive inner products, smallest cosine {smallest:.3f}")


# 5 -----------------------------------------------------------------------------------------
def _feedback_with_spectrum(jac, eigs, rng):
    """Q whose product J Q has the given real eigenvalues, plus a null-space component."""
    n = jac.shape[0]
    basis = np.linalg.qr(rng.standard_normal((n, n)))[0] + 0.3 * rng.standard_normal((n, n))
    s = basis @ np.diag(eigs) @ np.linalg.inv(basis)
    q = damped_pinv(jac, 0.0) @ s
    null = np.eye(jac.shape[1]) - damped_pinv(jac, 0.0) @ jac
    return q + 0.5 * null @ rng.standard_normal(q.shape)


def _exact_steady_state(p, r0, target, alpha):
    u, dv = solve_fixed_point(p, r0, target, alpha)
    return u, forward_pass(p, r0, dv=dv)


def _converges(p, r0, target, cfg, u_ss):
    try:
        traj, _ = simulate_forward_phase(p, r0, target, cfg, record=False)
    except DivergenceError:
        return False
    return bool(np.linalg.norm(traj.final_u - u_ss) <= 1e-3 * np.linalg.norm(u_ss))


def test_criterion_05_condition_predicts_stability():
    cfg = SimConfig(dt=5e-4, k_max=20000, tau_v=1e-3, tau_u=1.0, k_p=0.0, alpha_tilde=0.1)
    agree, n_ok = 0, 0
    for seed in range(20):
        rng = np.random.default_rng([5, seed])
        sizes = [5, 4, 3]
        kinds = ["tanh", "linear"] if seed % 4 >= 2 else ["linear", "linear"]
        p = init_params(sizes, kinds, rng)
        r0 = rng.uniform(-1, 1, 5)
        acts = forward_pass(p, r0)
        jac = network_jacobian(p, acts)
        eigs = rng.uniform(1, 3, 3)
        if seed % 2:
            eigs[0] = -rng.uniform(2, 4)
        p = p.with_feedback(_feedback_with_spectrum(jac, eigs, rng))
        target, _ = compute_target(acts.output, rng.uniform(-1, 1, 3), 0.1)
        u_ss, acts_ss = _exact_steady_state(p, r0, target, cfg.alpha_tilde)
        verdict, _ = condition3_check(network_jacobian(p, acts_ss), p.stacked_feedback(),
                                      cfg.alpha_tilde)
        agree += verdict == _converges(p, r0, target, cfg, u_ss)
        n_ok += verdict
    _check(5, "stability condition", agree == 20 and n_ok == 10,
           f"{agree}/20 verdicts match simulation ({n_ok} predicted stable)")


# 6 -----------------------------------------------------------------------------------------
def _fitted_rate(p, r0, target, cfg):
    traj, _ = simulate_forward_phase(p, r0, target, cfg)
    ss = analytic_steady_state(p, r0, target, cfg.alpha_tilde)
    u = np.stack(traj.u)
    dev = np.linalg.norm(u - ss.u, axis=1)
    t = cfg.dt * np.arange(len(dev))
    window = (dev < 1e-3 * dev.max()) & (dev > 1e-10 * dev.max())
    slope = np.polyfit(t[window], np.log(dev[window]), 1)[0]
    return slope, ss


def test_criterion_06_slowest_eigenvalue_matches_decay():
    cases = [
        ("scalar", make_params([[[1.3]]], feedback=[[[0.8]]]), np.array([1.0]), 0.4),
        ("two-layer", make_params([[[0.9, -0.4], [0.3, 0.8]], [[0.7, 0.5]]],
                                  feedback=[[[0.4], [0.2]], [[0.5]]]), np.array([0.6, -0.2]), 0.3),
    ]
    cfg = SimConfig(dt=1e-3, k_max=20000, tau_v=0.2, tau_u=1.0, k_p=1.5, alpha_tilde=0.3)
    errs, details = [], []
    for name, p, r0, shift in cases:
        target = forward_pass(p, r0).output + shift
        rate, ss = _fitted_rate(p, r0, target, cfg)
        ev = eigenvalues(a_pi_matrix(p, ss, cfg))
        slow = ev[np.argmax(ev.real)]
        assert abs(slow.imag) < 1e-12, f"{name}: slowest mode is oscillatory"
        errs.append(abs(rate - slow.real) / abs(slow.real))
        details.append(f"{name} eig {slow.real:.4f} fit {rate:.4f}")
    _check(6, "A_PI decay rate", max(errs) < 0.05,
           "; ".join(details) + f"; max rel err {max(errs):.2%} (tol 5%)")


# 7 -----------------------------------------------------------------------------------------
def test_criterion_07_feedback_learning_approaches_damped_pseudoinverse():
    t0 = time.time()
    rng = np.random.default_rng(7)
    p = init_params([20, 10, 5], ["linear", "linear"], rng)
    cfg = SimConfig(dt_fb=0.001, t_max_fb=300, tau_v_fb=0.3, tau_v_noise_phase=0.005, sigma=0.01,
                    beta=0.01, alpha_tilde_fb=0.5, k_p_fb=0.0, tau_u=1.0)
    jac = network_jacobian(p, forward_pass(p, np.zeros(20)))
    opt = OptimizerState("sgd", lr=1.0, group="feedback")
    batch = 8
    for it in range(2000):
        x = rng.uniform(-1, 1, (batch, 20))
        _, buf = simulate_feedback_phase(p, x, cfg, sample_streams(7, batch, it))
        p = apply_update(p, buf, opt)
    q = p.stacked_feedback()
    ratio = con2_ratio(q, jac)
    gammas = np.logspace(-5, 3, 33)
    angles = [angle_degrees(q, damped_pinv(jac, g)) for g in gammas]
    best = int(np.argmin(angles))
    elapsed = time.time() - t0
    _check(7, "feedback learning", ratio > 0.95 and angles[best] < 15 and elapsed < 300,
           f"con2 {ratio:.4f} (>0.95), min angle {angles[best]:.2f} deg at gamma={gammas[best]:.3g} "
           f"(<15), {elapsed:.0f}s (limit 300s)")


# 8 and 10 ----------------------------------------------------------------------------------
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def _toy_run(out_dir):
    from dfclab.experiment import load_config, run_training
    cfg = dataclasses.replace(load_config(os.path.join(CONFIG_DIR, "toy_regression.cfg")),
                              out_dir=str(out_dir))
    return cfg, run_training(cfg)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("toy")
    return _toy_run(base / "first"), base


def _read_rows(path):
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_08_toy_regression(toy_runs):
    (cfg, res), _ = toy_runs
    rows = _read_rows(res.metrics_path)
    train = [r for r in rows if r["phase"] == "train"]
    init_loss = res.summary["init_train_loss"]
    final_loss = res.summary["final"]["train_loss"]

    def windows(key):
        # one window per training epoch
        out = []
        for e in range(1, cfg.epochs + 1):
            vals = [float(r[key]) for r in train if int(r["epoch"]) == e and r[key]]
            out.append(float(np.mean(vals)))
        return out

    con2, mn = windows("con2_ratio"), windows("angle_mn_deg")
    eig = [float(r["max_real_eig_api"]) for r in train]
    ok = (min(con2) > 0.9 and max(mn) < 30 and len(eig) == len(train) and max(eig) < 0
          and init_loss / final_loss >= 10)
    _check(8, "toy regression", ok,
           f"con2 windows min {min(con2):.3f} (>0.9), MN-angle windows max {max(mn):.1f} deg (<30), "
           f"max Re eig A_PI {max(eig):.3f} (<0), train MSE {init_loss:.3f} -> {final_loss:.3f} "
           f"({init_loss / final_loss:.1f}x, >=10x)")


def test_criterion_10_repeat_run_is_byte_identical(toy_runs):
    (_, first), base = toy_runs
    _, second = _toy_run(base / "second")
    a = open(first.metrics_path, "rb").read()
    b = open(second.metrics_path, "rb").read()
    _check(10, "determinism", a == b and len(a) > 0,
           f"metrics CSV {len(a)} bytes, identical={a == b}")


# 9 -----------------------------------------------------------------------------------------
def test_criterion_09_mnist_subset_matches_backprop(tmp_path):
    pytest.importorskip("mlxtend")
    from dfclab.experiment import load_config, run_training
    from dfclab.experiment.cli import main
    t0 = time.time()
    data_dir = tmp_path / "idx"
    assert main(["gen-data", "--config", os.path.join(CONFIG_DIR, "mnist_bp.cfg"),
                 "--out", str(data_dir)]) == 0
    idx = dict(dataset="mnist_idx", images_path=str(data_dir / "train-images-idx3-ubyte"),
               labels_path=str(data_dir / "train-labels-idx1-ubyte"))
    acc = {}
    for name in ("mnist_bp", "mnist_dfc_ssa"):
        cfg = load_config(os.path.join(CONFIG_DIR, f"{name}.cfg"))
        cfg = dataclasses.replace(cfg, out_dir=str(tmp_path / name), **idx).validate()
        acc[name] = run_training(cfg).summary["final"]["train_acc"]
    gap = 100 * (acc["mnist_bp"] - acc["mnist_dfc_ssa"])
    elapsed = time.time() - t0
    _check(9, "MNIST subset", gap <= 5 and elapsed < 1800,
           f"train acc DFC-SSA {100 * acc['mnist_dfc_ssa']:.2f}% vs BP {100 * acc['mnist_bp']:.2f}% "
           f"(gap {gap:.2f} pp, <=5), {elapsed:.0f}s (limit 1800s)")
