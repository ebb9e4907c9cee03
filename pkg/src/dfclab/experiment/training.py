"""Wake-sleep training loop, evaluation, metrics and checkpoint wiring."""
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from dfclab.analysis import DiagnosticsRecord, batch_diagnostics, con2_ratio
from dfclab.baselines import DfaFeedback, bp_gradients, dfa_update, init_dfa_feedback
from dfclab.controller import compute_target, loss_value
from dfclab.data import (BatchStream, Dataset, TeacherSpec, generate_student_teacher, load_idx,
                         mnist_subset, read_idx)
from dfclab.dynamics import (DivergenceError, analytic_steady_state, sample_streams,
                             simulate_feedback_phase, simulate_forward_phase, simulate_ss_phase)
from dfclab.experiment.checkpoint import (load_checkpoint, params_from_tensors,
                                          restore_optimizer, save_checkpoint)
from dfclab.network import forward_pass, init_params, network_jacobian
from dfclab.numerics import SingularMatrixError, eigenvalues
from dfclab.plasticity import OptimizerState, apply_update

log = logging.getLogger(__name__)

# Namespaces for the per-sample noise streams.
_PRETRAIN, _FEEDBACK = 1, 2


def init_fixed_feedback(params):
    """Set ``Q_i`` to the transposed product of all downstream weights (``Q_L = I``)."""
    out = params.copy()
    L = params.depth
    q = np.eye(params.n_out)
    out.feedback[L - 1] = q.copy()
    for i in range(L - 2, -1, -1):
        q = params.weights[i + 1].T @ q
        out.feedback[i] = q.copy()
    return out


def _rows(a):
    return a.reshape(len(a), int(np.prod(a.shape[1:])))


def build_dataset(config):
    """Return ``(train_and_val, test)``; ``test`` may be ``None``."""
    if config.dataset == "teacher":
        spec = TeacherSpec(tuple(config.teacher_sizes), tuple(config.teacher_activations),
                           config.teacher_seed)
        train, test = generate_student_teacher(spec, config.n_train, config.n_test)
        return train, (test if len(test) else None)
    limit = config.data_limit or None
    if config.dataset == "mnist_subset":
        ds = mnist_subset()
        return (ds.subset(np.arange(limit)) if limit else ds), None
    if config.dataset == "mnist_idx":
        return load_idx(config.images_path, config.labels_path, limit), None
    x = read_idx(config.inputs_path, limit=limit).astype(np.float64)
    y = read_idx(config.targets_path, limit=limit).astype(np.float64)
    return Dataset(_rows(x), _rows(y)), None


def initial_params(config):
    rng = np.random.default_rng([config.seed, 7])
    params = init_params(config.sizes, config.activations, rng)
    if config.uses_feedback and config.feedback_mode == "fixed":
        params = init_fixed_feedback(params)
    if config.freeze_QL:
        params.feedback[-1] = np.eye(params.n_out)
    dfa = init_dfa_feedback(params, rng) if config.variant == "dfa" else None
    return params, dfa


def dfa_tensors(dfa):
    return {} if dfa is None else {f"B_{i + 1}": b for i, b in enumerate(dfa.matrices)}


def make_optimizers(config, L):
    clip = config.clip or None
    frozen = (L - 1,) if config.freeze_QL else ()
    fwd = OptimizerState(config.optimizer, config.lr, config.eps, clip=clip, group="forward")
    fb = OptimizerState(config.optimizer_fb, config.lr_fb, config.eps_fb, clip=clip,
                        group="feedback", frozen=frozen)
    pre = OptimizerState(config.optimizer_fb, config.lr_fb_pretrain, config.eps_fb, clip=clip,
                         group="feedback", frozen=frozen)
    return fwd, fb, pre


def forward_update(params, x, y, config, dfa=None):
    """Batch-averaged forward increments for the configured variant."""
    if config.variant == "bp":
        return bp_gradients(params, x, y, config.loss)
    if config.variant == "dfa":
        return dfa_update(params, dfa, x, y, config.loss)
    acts = forward_pass(params, x)
    target, _ = compute_target(acts.output, y, config.lam, config.loss)
    if config.variant == "dfc":
        return simulate_forward_phase(params, x, target, config.sim, record=False)[1]
    if config.variant == "dfc_ss":
        return simulate_ss_phase(params, x, target, config.sim)
    return analytic_steady_state(params, x, target, config.sim.alpha_tilde).buffer


def evaluate(params, ds, loss):
    """Mean per-sample loss and (for one-hot targets) accuracy."""
    if ds is None or len(ds) == 0:
        return None, None
    out = forward_pass(params, ds.inputs).output
    value = float(np.mean(loss_value(out, ds.targets, loss)))
    acc = None
    if ds.kind == "classification":
        acc = float(np.mean(np.argmax(out, axis=1) == np.argmax(ds.targets, axis=1)))
    return value, acc


def feedback_diagnostics(params, x, alpha):
    """Mean Condition-2 ratio over the batch and worst ``max Re eig(-(J Q + alpha I))``."""
    acts = forward_pass(params, x)
    jac = network_jacobian(params, acts)
    q = params.stacked_feedback()
    ratios, eigs = [], []
    for j in jac:
        try:
            ratios.append(con2_ratio(q, j))
        except SingularMatrixError:
            pass
        eigs.append(float(np.max(eigenvalues(-(j @ q) - alpha * np.eye(q.shape[1])).real)))
    return (float(np.mean(ratios)) if ratios else None), max(eigs)


class MetricsWriter:
    """Single-owner CSV writer; every row is flushed immediately."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(DiagnosticsRecord.columns())
        self._fh.flush()

    def write(self, rec):
        self._w.writerow(rec.as_row())
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class TrainingResult:
    params: object
    metrics_path: str
    summary: dict = field(default_factory=dict)


def _feedback_epoch(params, stream, epoch, config, opt, phase, namespace, writer, counter):
    for it, (x, _) in enumerate(stream.epoch(epoch)):
        streams = sample_streams(config.seed, len(x), namespace, epoch, it)
        _, buf = simulate_feedback_phase(params, x, config.sim, streams,
                                         freeze_output=config.freeze_QL)
        params = apply_update(params, buf, opt)
        counter[0] += 1
        if config.diagnostics_every and counter[0] % config.diagnostics_every == 0:
            c2, eig = feedback_diagnostics(params, x, config.sim.alpha_tilde)
            writer.write(DiagnosticsRecord(phase=phase, epoch=epoch, iteration=counter[0],
                                           con2_ratio=c2, max_real_eig_jq=eig))
    return params


def run_feedback_pretraining(params, stream, config, opt, writer):
    counter = [0]
    for e in range(config.fb_pretrain_epochs):
        params = _feedback_epoch(params, stream, e, config, opt, "fb_pretrain", _PRETRAIN,
                                 writer, counter)
    return params


def _select_best(history, classification):
    if not history:
        return None
    if classification:
        return max(history, key=lambda h: (h["val_acc"] if h["val_acc"] is not None else -1.0,
                                           -(h["val_loss"] if h["val_loss"] is not None else np.inf)))
    return min(history, key=lambda h: h["val_loss"] if h["val_loss"] is not None else np.inf)


def run_training(config, pretrain_only=False):
    """Run a full experiment and write ``metrics.csv``, checkpoints and ``summary.json``.

    Order: optional feedback pretraining, then per epoch one forward epoch
    followed by ``fb_epochs_per_fwd`` feedback epochs (learned feedback only),
    then validation and a checkpoint.

    Raises:
        DivergenceError: after flushing metrics and a summary marked ``diverged``.
    """
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_dir = os.path.join(config.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    data, test = build_dataset(config)
    stream = BatchStream(data, config.val_count, config.batch_size, config.seed)
    val = stream.val if len(stream.val) else None
    params, dfa = initial_params(config)
    fwd_opt, fb_opt, pre_opt = make_optimizers(config, params.depth)
    classification = data.kind == "classification"

    writer = MetricsWriter(os.path.join(config.out_dir, "metrics.csv"))
    summary = {"variant": config.variant, "feedback_mode": config.feedback_mode,
               "diverged": False}
    history = []
    epoch = 0
    try:
        tl, ta = evaluate(params, stream.train, config.loss)
        vl, va = evaluate(params, val, config.loss)
        summary["init_train_loss"] = tl
        writer.write(DiagnosticsRecord(phase="init", epoch=0, iteration=0, train_loss=tl,
                                       val_loss=vl, val_acc=va))
        if config.learns_feedback and config.fb_pretrain_epochs:
            params = run_feedback_pretraining(params, stream, config, pre_opt, writer)
        if pretrain_only:
            save_checkpoint(os.path.join(ckpt_dir, "pretrained.ckpt"), params, 0,
                            {"fb": pre_opt})
        else:
            iteration, fb_counter = 0, [0]
            for epoch in range(1, config.epochs + 1):
                for x, y in stream.epoch(epoch):
                    buf = forward_update(params, x, y, config, dfa)
                    iteration += 1
                    if config.diagnostics_every and iteration % config.diagnostics_every == 0:
                        rec = batch_diagnostics(params, x, y, config.lam, config.loss, config.sim,
                                                buf.flat_weights(), config.gamma)
                    else:
                        acts = forward_pass(params, x)
                        rec = DiagnosticsRecord(
                            train_loss=float(np.mean(loss_value(acts.output, y, config.loss))))
                    rec.phase, rec.epoch, rec.iteration = "train", epoch, iteration
                    writer.write(rec)
                    params = apply_update(params, buf, fwd_opt)
                if config.learns_feedback:
                    for k in range(config.fb_epochs_per_fwd):
                        fb_epoch = epoch * config.fb_epochs_per_fwd + k
                        params = _feedback_epoch(params, stream, fb_epoch, config, fb_opt, "fb",
                                                 _FEEDBACK, writer, fb_counter)
                tl, ta = evaluate(params, stream.train, config.loss)
                vl, va = evaluate(params, val, config.loss)
                writer.write(DiagnosticsRecord(phase="val", epoch=epoch, iteration=iteration,
                                               train_loss=tl, val_loss=vl, val_acc=va))
                history.append({"epoch": epoch, "train_loss": tl, "train_acc": ta,
                                "val_loss": vl if val is not None else tl,
                                "val_acc": va if val is not None else ta})
                save_checkpoint(os.path.join(ckpt_dir, f"epoch_{epoch:03d}.ckpt"), params, epoch,
                                {"fwd": fwd_opt, "fb": fb_opt}, dfa_tensors(dfa))
                log.info("epoch %d: train_loss=%.6g val_loss=%s val_acc=%s", epoch, tl, vl, va)
    except DivergenceError as exc:
        summary.update(diverged=True, diverged_epoch=epoch, diverged_step=exc.step,
                       diverged_phase=exc.phase)
        raise
    finally:
        writer.close()
        best = _select_best(history, classification)
        summary["epochs_completed"] = len(history)
        summary["best"] = best
        if history:
            summary["final"] = history[-1]
        if test is not None:
            summary["test_loss"], summary["test_acc"] = evaluate(params, test, config.loss)
        with open(os.path.join(config.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return TrainingResult(params, writer.path, summary)


def analyze(checkpoint_path, config, out_path=None):
    """Diagnostics for one batch of the data under a saved checkpoint.

    Returns:
        ``[DiagnosticsRecord]``; also written as CSV to ``out_path`` if given.
    """
    config.validate()
    tensors = load_checkpoint(checkpoint_path)
    params = params_from_tensors(tensors, config.activations)
    data, _ = build_dataset(config)
    stream = BatchStream(data, config.val_count, config.batch_size, config.seed)
    src = stream.val if len(stream.val) else stream.train
    x = src.inputs[:config.batch_size]
    y = src.targets[:config.batch_size]
    dfa = None
    if config.variant == "dfa":
        mats = [tensors[f"B_{i + 1}"] for i in range(params.depth - 1) if f"B_{i + 1}" in tensors]
        dfa = DfaFeedback(tuple(mats)) if len(mats) == params.depth - 1 else initial_params(config)[1]
    buf = forward_update(params, x, y, config, dfa)
    rec = batch_diagnostics(params, x, y, config.lam, config.loss, config.sim, buf.flat_weights(),
                            config.gamma)
    rec.phase = "analyze"
    rec.epoch = int(tensors["epoch"][0, 0]) if "epoch" in tensors else 0
    if out_path:
        w = MetricsWriter(out_path)
        w.write(rec)
        w.close()
    return [rec]


def resume_optimizers(tensors, params, config):
    """Rebuild optimizer states saved by :func:`run_training`."""
    fwd, fb, _ = make_optimizers(config, params.depth)
    restore_optimizer("fwd", fwd, tensors, params.weights + params.biases)
    restore_optimizer("fb", fb, tensors, params.feedback)
    return fwd, fb
