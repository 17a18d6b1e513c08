"""Plain-text pipeline configuration.

A config file is INI-style: ``[section]`` headers followed by ``key = value``
lines. Every key has a typed default below; unknown sections or keys are
rejected so typos fail loudly instead of silently falling back to defaults.

Example::

    [data]
    grid = 32
    factor = 4
    sigma_het = 0.7

    [sweep]
    kappas = 10:1:0.5
"""

import configparser
import hashlib
import json
import math
from dataclasses import dataclass

from .exceptions import ConfigError

# section -> key -> default; the type of the default is the parse type
DEFAULTS = {
    "run": {
        "seed": 0,
        "out": "runs/default",
        "threads": 1,
        "cycles": 1,
    },
    "data": {
        "source": "synthetic",
        "path": "",
        "grid": 64,
        "factor": 8,
        "offset": 0,
        "n_subregions": 4,
        "n_snapshots": 214,
        "train_fraction": 0.75,
        "split_mode": "per_subregion",
        "normalization": "combined",
        "dc_power": 0.1,
        "ring_center": 5.0,
        "ring_width": 1.5,
        "ring_power": 1.0,
        "background_power": 0.02,
        "pixel_variance": 2.0,
        "sigma_het": 0.5,
        "mean_level": 8.0,
    },
    "model": {
        "channels": 32,
        "n_layers": 6,
        "kernel_size": 3,
    },
    "stage1": {
        "epochs": 300,
        "batch_size": 32,
        "schedule": "fixed",
        "lr": 1e-2,
        "lr_rate": 0.95,
        "lr_floor": 1e-4,
    },
    "stage2": {
        "kappa": "5.5",
        "residuals": "all",
        "eps_s": 1e-8,
        "eps_sigma": 1e-12,
        "selection": "prior",
    },
    "stage3": {
        "mode": "global",
        "epochs": 300,
        "batch_size": 32,
        "schedule": "exp_decay",
        "lr": 1e-2,
        "lr_rate": 0.95,
        "lr_floor": 1e-4,
    },
    "sweep": {
        "kappas": "10:1:0.5",
        "epochs": 0,
        "workers": 1,
    },
    "evaluate": {
        "n_samples": 100,
        "slice_rows": "",
        "eps_div": 1e-6,
    },
}

CHOICES = {
    ("data", "source"): ("synthetic", "directory"),
    ("data", "split_mode"): ("per_subregion", "global_count"),
    ("data", "normalization"): ("combined", "train"),
    ("stage1", "schedule"): ("fixed", "exp_decay"),
    ("stage3", "schedule"): ("fixed", "exp_decay"),
    ("stage2", "residuals"): ("all", "train"),
    ("stage2", "selection"): ("prior", "global"),
    ("stage3", "mode"): ("global", "image"),
}

# keys that change where or how fast things run but never what is computed
_RUNTIME_ONLY = {("run", "out"), ("run", "threads"), ("sweep", "workers")}


def parse_kappa(text):
    """``"inf"``, ``"unreg"`` (means 0) or a non-negative float."""
    t = str(text).strip().lower()
    if t in ("inf", "infinity", "∞"):
        return math.inf
    if t in ("unreg", "none"):
        return 0.0
    try:
        k = float(t)
    except ValueError:
        raise ConfigError(f"kappa must be a number, 'inf' or 'unreg', got {text!r}") from None
    if k < 0 or math.isnan(k):
        raise ConfigError(f"kappa must be non-negative, got {text!r}")
    return k


def parse_kappa_list(text):
    """Comma list of kappas, or ``start:stop:step`` counting down inclusive."""
    t = str(text).strip()
    if ":" in t:
        try:
            start, stop, step = (float(p) for p in t.split(":"))
        except ValueError:
            raise ConfigError(f"kappa range must be start:stop:step, got {text!r}") from None
        if step <= 0:
            raise ConfigError("kappa range step must be positive")
        n = int(round(abs(start - stop) / step))
        sign = -1.0 if stop < start else 1.0
        values = [round(start + sign * i * step, 10) for i in range(n + 1)]
        return values
    values = [parse_kappa(p) for p in t.split(",") if p.strip()]
    if not values:
        raise ConfigError("empty kappa list")
    return values


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from None
    choices = CHOICES.get((section, key))
    if choices and value not in choices:
        raise ConfigError(f"[{section}] {key} must be one of {choices}, got {value!r}")
    return value


@dataclass
class PipelineConfig:
    """Fully resolved settings, one nested dict per section."""

    values: dict

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = _coerce(section, key, str(value))

    @property
    def kappa(self):
        return parse_kappa(self.values["stage2"]["kappa"])

    @property
    def kappas(self):
        return parse_kappa_list(self.values["sweep"]["kappas"])

    @property
    def slice_rows(self):
        text = self.values["evaluate"]["slice_rows"].strip()
        if not text:
            return None
        try:
            return [int(r) for r in text.split(",")]
        except ValueError:
            raise ConfigError(f"slice_rows must be comma-separated ints, got {text!r}") from None

    def validate(self):
        d, m = self.values["data"], self.values["model"]
        if d["grid"] < 1 or d["factor"] < 1 or d["grid"] % d["factor"]:
            raise ConfigError(f"grid {d['grid']} must be a positive multiple of factor {d['factor']}")
        if d["factor"] & (d["factor"] - 1):
            raise ConfigError(f"factor {d['factor']} must be a power of two")
        if m["n_layers"] < int(math.log2(d["factor"])) + 1:
            raise ConfigError("n_layers too small for the upscale factor")
        if not 0 <= d["offset"] < d["factor"]:
            raise ConfigError("offset must lie in [0, factor)")
        if not 0 < d["train_fraction"] < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if d["source"] == "directory" and not d["path"]:
            raise ConfigError("[data] source = directory needs a path")
        for st in ("stage1", "stage3"):
            if self.values[st]["epochs"] < 1 or self.values[st]["batch_size"] < 1:
                raise ConfigError(f"[{st}] epochs and batch_size must be >= 1")
        if self.values["run"]["cycles"] < 1:
            raise ConfigError("cycles must be >= 1")
        if self.values["evaluate"]["n_samples"] < 4:
            raise ConfigError("n_samples must be >= 4 for a surface boxplot")
        parse_kappa(self.values["stage2"]["kappa"])
        _ = self.kappas, self.slice_rows
        return self

    def to_ini(self):
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in entries.items())
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        """sha256 over every setting that can change a result."""
        material = {s: {k: str(v) for k, v in e.items() if (s, k) not in _RUNTIME_ONLY}
                    for s, e in self.values.items()}
        blob = json.dumps(material, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def default_config():
    return PipelineConfig({s: dict(e) for s, e in DEFAULTS.items()})


def parse_config(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = default_config()
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{source}: unknown key [{section}] {key}")
            cfg.values[section][key] = _coerce(section, key, raw)
    return cfg.validate()


def load_config(path=None):
    """Read ``path`` (or return the defaults when None)."""
    if path is None:
        return default_config().validate()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))
