"""Run configuration: one JSON document governs every command.

Dataclass defaults are the reference settings; desk-scale tests override
through the same fields. Unknown keys are rejected so typos cannot silently
fall back to defaults.
"""

import dataclasses
from dataclasses import dataclass, field

from .exceptions import ConfigError


@dataclass
class SynthSpec:
    ndim: int = 2
    shape: tuple = (64, 64)
    n_train: int = 40
    n_val: int = 8
    n_test: int = 20
    num_labels: int = 5
    amplitude: float = 4.0
    smooth_sigma: float = 6.0
    noise_sigma: float = 0.02
    multimodal: bool = False

    def validate(self):
        if self.ndim not in (2, 3):
            raise ConfigError("synth.ndim must be 2 or 3")
        if len(self.shape) != self.ndim:
            raise ConfigError("synth.shape must have ndim entries")
        if any(s % 4 for s in self.shape):
            raise ConfigError("synth.shape entries must be divisible by 4")
        if self.num_labels < 1:
            raise ConfigError("synth.num_labels must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("synth split sizes must be >= 1")
        if self.amplitude < 0 or self.smooth_sigma <= 0 or self.noise_sigma < 0:
            raise ConfigError("synth noise/deformation parameters out of range")


@dataclass
class SearchConfig:
    lr_omega: float = 1e-4
    lr_alpha: float = 1e-4
    lr_lambda: float = 4e-3
    stability_window: int = 10
    max_epochs_feature: int = 40
    max_epochs_deform: int = 40
    max_epochs_hyper: int = 40
    warm_epochs: int = 10
    post_weight_epochs: int = 15
    post_joint_epochs: int = 30
    lambda_init: tuple = (0.5, 1.0, 0.1, 0.1)
    lambda_l2: float = 1e-3
    lambda_stability_tol: float = 1e-3
    squaring_steps: int = 7
    ncc_window: int = 9
    mind_sigma: float = 0.5
    channels: int = 16
    opt_omega: str = "adam"
    opt_lambda: str = "adam"
    opt_alpha: str = "sgd"
    strict_v_term: bool = False
    eps_gradient_guard: bool = True
    op_subset: tuple = ()   # catalog indices; empty = full catalog
    freeze_op: int = -1     # index into the active catalog; -1 = none
    checkpoint_every: int = 1

    def validate(self):
        if min(self.lr_omega, self.lr_alpha, self.lr_lambda) <= 0:
            raise ConfigError("search learning rates must be > 0")
        if self.stability_window < 1:
            raise ConfigError("search.stability_window must be >= 1")
        for name in ("max_epochs_feature", "max_epochs_deform",
                     "max_epochs_hyper", "warm_epochs",
                     "post_weight_epochs", "post_joint_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError("search.%s must be >= 0" % name)
        if len(self.lambda_init) != 4:
            raise ConfigError("search.lambda_init needs 4 entries")
        if not 0 <= self.lambda_init[0] <= 1 or min(self.lambda_init[1:]) < 0:
            raise ConfigError("search.lambda_init violates the lambda box")
        if self.squaring_steps < 1:
            raise ConfigError("search.squaring_steps must be >= 1")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ConfigError("search.ncc_window must be odd and >= 3")
        if self.channels < 1:
            raise ConfigError("search.channels must be >= 1")
        for name in ("opt_omega", "opt_lambda", "opt_alpha"):
            if getattr(self, name) not in ("adam", "sgd"):
                raise ConfigError("search.%s must be 'adam' or 'sgd'" % name)
        n_ops = len(self.op_subset) if self.op_subset else 8
        if self.freeze_op >= n_ops:
            raise ConfigError("search.freeze_op outside the active catalog")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    checkpoint_every: int = 10

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float64"
    synth: SynthSpec = field(default_factory=SynthSpec)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        self.synth.validate()
        self.search.validate()
        self.train.validate()
        return self


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError("%s must be an object" % path)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError("unknown key(s) %s in %s"
                          % (", ".join(sorted(unknown)), path))
    kwargs = {}
    for key, value in data.items():
        fld = names[key]
        if dataclasses.is_dataclass(fld.type) or fld.type in (SynthSpec, SearchConfig, TrainConfig):
            kwargs[key] = _build(fld.type, value, "%s.%s" % (path, key))
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError("bad %s: %s" % (path, exc)) from exc


def config_from_dict(data):
    cfg = _build(RunConfig, data, "config")
    cfg.validate()
    return cfg


def config_to_dict(cfg):
    def unpack(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: unpack(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj
    return unpack(cfg)
