"""Experiment configuration stored as a sectioned key/value text file."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .fit_full import FitConfig, phi_grid, sigma2_grid
from .model import Kind

FITTERS = ("mfvb", "infvb-phi", "infvb-phi-sigma", "infvb-sigma", "mcmc")
MODEL_FITTERS = {
    "full": ("infvb-phi", "infvb-phi-sigma", "mcmc"),
    "basis": ("mfvb", "infvb-sigma", "mcmc"),
}

# section of each field in the text form
SECTIONS = {
    "experiment": ("model", "kind", "fitter", "seed", "output"),
    "data": ("csv", "n", "train_fraction", "beta", "sigma2", "phi", "nu", "tau2"),
    "basis": ("m", "basis_on_all_locations"),
    "fit": ("grid_phi_size", "grid_sigma2_size", "sigma2_lower", "sigma2_upper", "sigma2_bounds",
            "epsilon_star", "max_inner_iterations", "weight_mode", "volume_correction", "prune_nats", "elbo_guard"),
    "predict": ("draws", "joint", "save_draws"),
    "mcmc": ("iterations", "burn_in", "thin", "phi_every"),
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment settings."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "full"
    kind: str = "bernoulli"
    fitter: str = "infvb-phi"
    seed: int = 0
    output: str = "results"
    # empty csv means simulate with the settings below
    csv: str = ""
    n: int = 500
    train_fraction: float = 0.8
    beta: tuple = (1.0, 1.0)
    sigma2: float = 1.0
    phi: float = 0.5
    nu: float = 0.5
    tau2: float = 0.0
    m: int = 50
    basis_on_all_locations: bool = False
    grid_phi_size: int = 50
    grid_sigma2_size: int = 20
    sigma2_lower: float = 1e-3
    sigma2_upper: float = 2000.0
    sigma2_bounds: str = "fixed"
    epsilon_star: float = 1e-4
    max_inner_iterations: int = 500
    weight_mode: str = "softmax"
    volume_correction: bool = True
    prune_nats: float = 50.0
    elbo_guard: bool = True
    draws: int = 2000
    joint: bool = True
    save_draws: bool = True
    iterations: int = 50_000
    burn_in: int = -1
    thin: int = 10
    phi_every: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind).value)
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        self.validate()

    def validate(self):
        if self.model not in MODEL_FITTERS:
            raise ConfigError(f"model must be 'full' or 'basis', got {self.model!r}")
        if self.fitter not in FITTERS:
            raise ConfigError(f"unknown fitter {self.fitter!r}; choose from {', '.join(FITTERS)}")
        if self.fitter not in MODEL_FITTERS[self.model]:
            raise ConfigError(f"fitter {self.fitter!r} does not apply to the {self.model} model "
                              f"(use one of {', '.join(MODEL_FITTERS[self.model])})")
        if self.sigma2_bounds not in ("fixed", "auto"):
            raise ConfigError("sigma2_bounds must be 'fixed' or 'auto'")
        if self.weight_mode not in ("softmax", "literal"):
            raise ConfigError("weight_mode must be 'softmax' or 'literal'")
        if self.n < 2 or not 0 < self.train_fraction < 1:
            raise ConfigError("need n >= 2 and 0 < train_fraction < 1")
        if self.m < 1:
            raise ConfigError("basis size m must be at least 1")
        if min(self.grid_phi_size, self.grid_sigma2_size, self.draws, self.thin, self.phi_every) < 1:
            raise ConfigError("grid sizes, draws, thin and phi_every must be positive")
        if not 0 < self.sigma2_lower < self.sigma2_upper:
            raise ConfigError("need 0 < sigma2_lower < sigma2_upper")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")

    @property
    def simulated(self) -> bool:
        return not self.csv

    def fit_config(self, phi_upper: float, workers: int | None = None,
                   sigma2_range: tuple | None = None) -> FitConfig:
        lo, hi = sigma2_range or (self.sigma2_lower, self.sigma2_upper)
        return FitConfig(grid_phi=phi_grid(self.grid_phi_size, phi_upper),
                         grid_sigma2=sigma2_grid(self.grid_sigma2_size, lo, hi),
                         epsilon_star=self.epsilon_star, max_inner_iterations=self.max_inner_iterations,
                         weight_mode=self.weight_mode, workers=workers, seed=self.seed, nu=self.nu,
                         volume_correction=self.volume_correction, prune_nats=self.prune_nats,
                         elbo_guard=self.elbo_guard)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with fields replaced from string (or already typed) values."""
        types = _field_types()
        typed = {}
        for key, value in overrides.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown setting {key!r}")
            typed[key] = _parse_value(types[key], value) if isinstance(value, str) else value
        try:
            return replace(self, **typed)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _field_types() -> dict:
    defaults = ExperimentConfig.__dataclass_fields__
    return {f.name: type(defaults[f.name].default) for f in fields(ExperimentConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


_BOOLEAN = configparser.ConfigParser.BOOLEAN_STATES


def _parse_value(kind: type, text: str):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in _BOOLEAN:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOLEAN[text.lower()]
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return text


def to_parser(config: ExperimentConfig) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in SECTIONS.items():
        parser[section] = {k: _format_value(getattr(config, k)) for k in keys}
    return parser


def dumps(config: ExperimentConfig) -> str:
    buf = io.StringIO()
    to_parser(config).write(buf)
    return buf.getvalue()


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse the text form; missing keys keep the values of ``base``."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    overrides = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            overrides[key] = value
    return (base or ExperimentConfig()).with_overrides(overrides)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(config), encoding="utf-8")


def parse_assignments(text: str) -> dict:
    """``"n=2000,m=20,phi=0.5"`` to a dict; a beta list uses semicolons (``beta=1;1``)."""
    out = {}
    for part in (p for p in text.split(",") if p.strip()):
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def default_grid_sizes(scale: str) -> dict:
    """Grid sizes at desk scale and at large scale."""
    if scale == "large":
        return {"grid_phi_size": 1000, "grid_sigma2_size": 100}
    return {"grid_phi_size": 50, "grid_sigma2_size": 20}
