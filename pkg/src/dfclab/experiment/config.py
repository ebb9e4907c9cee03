"""Experiment configuration and its ``key = value`` file format."""
import dataclasses
from dataclasses import dataclass, field

from dfclab.controller import LOSSES, ConfigError
from dfclab.dynamics import SimConfig

VARIANTS = ("dfc", "dfc_ss", "dfc_ssa", "bp", "dfa")
DATASETS = ("teacher", "mnist_subset", "mnist_idx", "regression_idx")


def _tuple_of(conv):
    def parse(text):
        return tuple(conv(p.strip()) for p in str(text).split(",") if p.strip())
    return parse


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    variant: str = "dfc_ssa"
    feedback_mode: str = "learned"
    freeze_QL: bool = False
    epochs: int = 1
    fb_epochs_per_fwd: int = 1
    fb_pretrain_epochs: int = 10
    lam: float = 0.01
    loss: str = "squared_error"
    optimizer: str = "sgd"
    optimizer_fb: str = "adam"
    lr: float = 0.01
    lr_fb: float = 1e-4
    lr_fb_pretrain: float = 5e-4
    eps: float = 1e-8
    eps_fb: float = 1e-8
    clip: float = 0.0
    sizes: tuple = (15, 10, 10, 5)
    activations: tuple = ("tanh", "tanh", "linear")
    batch_size: int = 32
    val_count: int = 0
    dataset: str = "teacher"
    n_train: int = 1000
    n_test: int = 0
    teacher_sizes: tuple = (15, 20, 15, 15, 5)
    teacher_activations: tuple = ("tanh", "tanh", "tanh", "linear")
    teacher_seed: int = 1
    images_path: str = ""
    labels_path: str = ""
    inputs_path: str = ""
    targets_path: str = ""
    data_limit: int = 0
    gamma: float = 0.1
    diagnostics_every: int = 1
    seed: int = 0
    out_dir: str = "runs/default"
    sim: SimConfig = field(default_factory=SimConfig)

    def validate(self):
        """Raise :class:`ConfigError` for any inconsistent setting."""
        checks = [
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.feedback_mode in ("learned", "fixed"), "feedback_mode must be learned or fixed"),
            (self.fb_epochs_per_fwd in (1, 2, 3), "fb_epochs_per_fwd must be 1, 2 or 3"),
            (self.epochs >= 0 and self.fb_pretrain_epochs >= 0, "epoch counts must be nonnegative"),
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (self.optimizer in ("sgd", "adam") and self.optimizer_fb in ("sgd", "adam"),
             "optimizers must be sgd or adam"),
            (min(self.lr, self.lr_fb, self.lr_fb_pretrain) > 0, "learning rates must be positive"),
            (min(self.eps, self.eps_fb) > 0, "adam epsilons must be positive"),
            (self.lam >= 0, "lambda must be nonnegative"),
            (self.clip >= 0, "clip must be nonnegative (0 disables)"),
            (len(self.sizes) >= 2 and min(self.sizes) > 0, "sizes needs at least two positive widths"),
            (len(self.activations) == len(self.sizes) - 1,
             "activations needs one entry per layer (len(sizes) - 1)"),
            (all(a in ("tanh", "linear") for a in self.activations), "activations must be tanh or linear"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (self.gamma >= 0, "gamma must be nonnegative"),
            (self.diagnostics_every >= 0, "diagnostics_every must be nonnegative"),
        ]
        if self.dataset == "teacher":
            checks += [
                (self.teacher_sizes[0] == self.sizes[0] and self.teacher_sizes[-1] == self.sizes[-1],
                 "teacher input/output widths must match the student"),
                (len(self.teacher_activations) == len(self.teacher_sizes) - 1,
                 "teacher_activations needs one entry per teacher layer"),
                (self.n_train > 0, "n_train must be positive"),
            ]
        if self.dataset == "mnist_idx":
            checks.append((bool(self.images_path and self.labels_path),
                           "mnist_idx needs images_path and labels_path"))
        if self.dataset == "regression_idx":
            checks.append((bool(self.inputs_path and self.targets_path),
                           "regression_idx needs inputs_path and targets_path"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def uses_feedback(self):
        return self.variant in ("dfc", "dfc_ss", "dfc_ssa")

    @property
    def learns_feedback(self):
        return self.uses_feedback and self.feedback_mode == "learned"


_TOP = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "sim"}
_SIM = {f.name: f for f in dataclasses.fields(SimConfig)}
# File key aliases (``lambda`` is a Python keyword).
_ALIASES = {"lambda": "lam", "out": "out_dir"}


def _converter(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _tuple_of(int if default and isinstance(default[0], int) else str)
    return str


def _defaults():
    base, sim = ExperimentConfig(), SimConfig()
    return base, sim


def apply_overrides(config, pairs):
    """Set fields from ``(key, raw_value)`` pairs, converting by the default's type."""
    base, sim_base = _defaults()
    top, sim = {}, {}
    for key, raw in pairs:
        key = _ALIASES.get(key, key)
        if key in _TOP:
            target, dflt = top, getattr(base, key)
        elif key in _SIM:
            target, dflt = sim, getattr(sim_base, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            target[key] = _converter(dflt)(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
    sim_cfg = dataclasses.replace(config.sim, **sim) if sim else config.sim
    return dataclasses.replace(config, **top, sim=sim_cfg)


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs.append((key, value))
    try:
        return apply_overrides(ExperimentConfig(), pairs).validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
