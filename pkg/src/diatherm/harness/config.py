"""Flat key-value run configuration with dotted section keys.

A config file is plain text, one ``section.key = value`` per line, ``#``
comments allowed.  Every key has a default matching the reference protocol
(Rabi 600 kHz, recoil 18.5 kHz, transverse COM 4.797 MHz, B0 = 5 J0,
J0 tau = 1/2, t_f = 6 tau, chains of 6 to 12 ions).  CLI ``--set`` overrides
use the same keys.
"""

import hashlib
from dataclasses import dataclass, fields, replace

from ..errors import ConfigError

_SIGNS = ("FM", "AFM")
_ENSEMBLES = ("all_states", "ground_sector")
_FIT_METHODS = ("average", "fluctuation", "ratio")
_OBSERVABLE_FILES = ("probabilities", "observables", "structure", "trajectory")


@dataclass(frozen=True)
class RunConfig:
    # run
    n_ions: int = 10
    sign: str = "FM"
    alpha_target: float = 1.0
    omega_axial: float | None = None  # Hz; overrides the alpha tuner when set
    # trap
    rabi: float = 600e3               # Hz
    recoil: float = 18.5e3            # Hz
    omega_transverse: float = 4.797e6  # Hz
    wavelength: float = 355e-9        # m
    # ramp
    b0_over_j0: float = 5.0
    j0_tau: float = 0.5
    t_f_over_tau: float = 6.0
    t_f_ms: float | None = None       # overrides the j0_tau-derived final time
    # dt policy
    steps_per_tau: int = 2000
    gate_tol: float = 3e-5            # aligned final-state distance between dt and dt/2
    max_halvings: int = 8             # 0 disables the convergence gate
    # sampling and analysis
    n_samples: int = 61
    ensemble: str = "all_states"
    fit_methods: tuple = _FIT_METHODS
    thermal_fit_for_observables: str = "average"
    emit: tuple = _OBSERVABLE_FILES  # which optional bundle tables to write


#: key -> (field name, parser); the single source of truth for config keys.
_KEYMAP = {
    "run.n_ions": ("n_ions", int),
    "run.sign": ("sign", str),
    "run.alpha_target": ("alpha_target", float),
    "run.omega_axial": ("omega_axial", float),
    "trap.rabi": ("rabi", float),
    "trap.recoil": ("recoil", float),
    "trap.omega_transverse": ("omega_transverse", float),
    "trap.wavelength": ("wavelength", float),
    "ramp.b0_over_j0": ("b0_over_j0", float),
    "ramp.j0_tau": ("j0_tau", float),
    "ramp.t_f_over_tau": ("t_f_over_tau", float),
    "ramp.t_f_ms": ("t_f_ms", float),
    "dt.steps_per_tau": ("steps_per_tau", int),
    "dt.gate_tol": ("gate_tol", float),
    "dt.max_halvings": ("max_halvings", int),
    "evolve.n_samples": ("n_samples", int),
    "fits.ensemble": ("ensemble", str),
    "fits.methods": ("fit_methods", lambda s: tuple(p.strip() for p in s.split(",") if p.strip())),
    "observables.thermal_fit": ("thermal_fit_for_observables", str),
    "observables.emit": ("emit", lambda s: tuple(p.strip() for p in s.split(",") if p.strip())),
}

_FIELD_TO_KEY = {field: key for key, (field, _) in _KEYMAP.items()}
_NONE_TOKENS = ("", "none", "auto")


def _parse_lines(text, source):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value.strip(), f"{source}:{lineno}"))
    return pairs


def _apply(config, key, value, where):
    if key not in _KEYMAP:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    field_name, parser = _KEYMAP[key]
    if value.lower() in _NONE_TOKENS:
        parsed = None
    else:
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse {key} = {value!r}: {exc}") from None
    return replace(config, **{field_name: parsed})


def parse_config(text, source="<config>", base=None):
    """Parse config text on top of the defaults (or an existing config)."""
    config = base if base is not None else RunConfig()
    for key, value, where in _parse_lines(text, source):
        config = _apply(config, key, value, where)
    return config


def load_config(path, overrides=()):
    """Read a config file and apply ``key=value`` override strings."""
    with open(path, encoding="utf-8") as handle:
        config = parse_config(handle.read(), source=str(path))
    return apply_overrides(config, overrides)


def apply_overrides(config, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        config = _apply(config, key.strip(), value.strip(), "--set")
    return config


def validate_config(config):
    """Raise ConfigError on any out-of-range field; returns the config."""
    checks = [
        (config.n_ions >= 1, "run.n_ions must be >= 1"),
        (config.sign in _SIGNS, f"run.sign must be one of {_SIGNS}"),
        (config.omega_axial is not None or config.alpha_target is not None,
         "one of run.alpha_target or run.omega_axial is required"),
        (config.rabi > 0, "trap.rabi must be positive"),
        (config.recoil > 0, "trap.recoil must be positive"),
        (config.omega_transverse > 0, "trap.omega_transverse must be positive"),
        (config.wavelength > 0, "trap.wavelength must be positive"),
        (config.b0_over_j0 > 0, "ramp.b0_over_j0 must be positive"),
        (config.j0_tau > 0, "ramp.j0_tau must be positive"),
        (config.t_f_over_tau > 0, "ramp.t_f_over_tau must be positive"),
        (config.t_f_ms is None or config.t_f_ms >= 0, "ramp.t_f_ms must be >= 0"),
        (config.steps_per_tau >= 1, "dt.steps_per_tau must be >= 1"),
        (config.gate_tol > 0, "dt.gate_tol must be positive"),
        (config.max_halvings >= 0, "dt.max_halvings must be >= 0"),
        (config.n_samples >= 2, "evolve.n_samples must be >= 2"),
        (config.ensemble in _ENSEMBLES, f"fits.ensemble must be one of {_ENSEMBLES}"),
        (all(m in _FIT_METHODS for m in config.fit_methods),
         f"fits.methods entries must be among {_FIT_METHODS}"),
        (config.thermal_fit_for_observables in config.fit_methods,
         "observables.thermal_fit must be one of fits.methods"),
        (all(e in _OBSERVABLE_FILES for e in config.emit),
         f"observables.emit entries must be among {_OBSERVABLE_FILES}"),
    ]
    if config.alpha_target is not None and not 0.5 <= config.alpha_target <= 2.0:
        raise ConfigError("run.alpha_target must lie in [0.5, 2]")
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return config


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def render_config(config):
    """Canonical text form: every key, sorted, fully resolved."""
    lines = []
    field_values = {f.name: getattr(config, f.name) for f in fields(config)}
    for key in sorted(_KEYMAP):
        field_name, _ = _KEYMAP[key]
        lines.append(f"{key} = {_format_value(field_values[field_name])}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    """Short, stable identifier of the fully resolved configuration."""
    return hashlib.sha256(render_config(config).encode()).hexdigest()[:16]


def parse_grid(text, source="<grid>"):
    """Sweep grid: comma-separated value lists for the four swept keys."""
    allowed = {
        "grid.n_ions": ("n_ions", int),
        "grid.alpha": ("alpha", float),
        "grid.sign": ("sign", str),
        "grid.t_f_ms": ("t_f_ms", float),
    }
    grid = {"n_ions": None, "alpha": None, "sign": None, "t_f_ms": None}
    for key, value, where in _parse_lines(text, source):
        if key not in allowed:
            raise ConfigError(f"{where}: unknown grid key {key!r}")
        name, parser = allowed[key]
        try:
            grid[name] = tuple(parser(part.strip()) for part in value.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse {key}: {exc}") from None
    for name, values in grid.items():
        if values is not None and not values:
            raise ConfigError(f"grid.{name} must list at least one value")
    if grid["sign"] is not None:
        for sign in grid["sign"]:
            if sign not in _SIGNS:
                raise ConfigError(f"grid.sign entries must be among {_SIGNS}")
    return grid


def load_grid(path):
    with open(path, encoding="utf-8") as handle:
        return parse_grid(handle.read(), source=str(path))
