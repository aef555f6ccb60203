"""Run configuration: a typed ``key = value`` file under a ``[run]`` section.

Every key has a fixed type and a default taken from the desk-scale preset.
Lists are comma separated.  ``outlier_M`` accepts ``auto`` (theory value),
``off`` (no clipping) or a number.  ``network`` is either ``lattice:m`` or a
path to a network file.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass
from pathlib import Path

SECTION = "run"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    kind: type | str
    default: object
    doc: str

    def parse(self, text: str):
        text = text.strip()
        if self.kind == "floats":
            return _floats(text)
        if self.kind == "opt_str":
            return None if text in ("", "none") else text
        if self.kind is bool:
            return text.lower() in ("1", "true", "yes", "on")
        return self.kind(text)


SCHEMA = [
    Key("grid_n", int, 128, "points per dimension (power of two)"),
    Key("nu", float, 1e-3, "kinematic viscosity"),
    Key("dt", float, 0.0625, "integrator step"),
    Key("delta", float, 1.0, "observation spacing (multiple of dt)"),
    Key("mu", float, 0.5, "nudging relaxation parameter (1/time)"),
    Key("mu_sweep", "floats", (0.5, 1.0, 2.0, 5.0, 10.0), "mu values (times 1/delta) for the synchronization sweep"),
    Key("filter_lambda", float, 32.0, "spectral filter cutoff on |k|^2"),
    Key("network", str, "lattice:8", "lattice:m or path to a network file"),
    Key("radius_cells", float, math.sqrt(6.0), "disc radius in grid spacings (ignored for network files)"),
    Key("force_seed", int, 1, "seed of the random forcing"),
    Key("force_lambda_m", float, 9.0, "lower edge of the forcing shell (|k|^2)"),
    Key("force_lambda_M", float, 18.0, "upper edge of the forcing shell (|k|^2)"),
    Key("force_l2", float, 0.025, "L2 norm of the forcing"),
    Key("force_file", "opt_str", None, "checkpoint holding the forcing (overrides the seed)"),
    Key("initial_state", "opt_str", None, "checkpoint holding the reference initial state"),
    Key("spinup_time", float, 1500.0, "length of the spin-up integration"),
    Key("epsilon", float, 1e-4, "measurement noise scale"),
    Key("noise_seed", int, 0, "base seed of the noise streams"),
    Key("outlier_M", str, "auto", "auto, off, or a numeric threshold"),
    Key("mode", str, "filtered", "plain or filtered"),
    Key("t_end", float, 300.0, "assimilation run length"),
    Key("members", int, 24, "ensemble size"),
    Key("eps_list", "floats", (1e-3, 1e-4, 1e-5), "noise scales for the sweep"),
    Key("bands", "floats", (0.88, 0.70, 0.40), "percentile band levels"),
    Key("window_lo", float, 150.0, "start of the statistics window"),
    Key("window_hi", float, 300.0, "end of the statistics window"),
    Key("certify_trials", int, 200, "random fields for the type-I certificate"),
    Key("tail_x", "floats", (1.0, 3.0, 5.0), "x values for the chi-square tail check"),
    Key("tail_draws", int, 100_000, "Monte Carlo draws per tail check"),
]
KEYS = {k.name: k for k in SCHEMA}


class ConfigFileError(ValueError):
    pass


def defaults() -> dict:
    return {k.name: k.default for k in SCHEMA}


def parse(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    cfg = defaults()
    if cp.has_section(SECTION):
        for name, raw in cp.items(SECTION):
            if name not in KEYS:
                raise ConfigFileError(f"unknown config key {name!r}")
            try:
                cfg[name] = KEYS[name].parse(raw)
            except ValueError as exc:
                raise ConfigFileError(f"bad value for {name}: {raw!r} ({exc})") from None
    check(cfg)
    return cfg


def load(path) -> dict:
    return parse(Path(path).read_text())


def serialize(cfg: dict) -> str:
    buf = io.StringIO()
    buf.write(f"[{SECTION}]\n")
    for k in SCHEMA:
        v = cfg[k.name]
        buf.write(f"{k.name} = {'none' if v is None else _fmt(v)}\n")
    return buf.getvalue()


def check(cfg: dict) -> None:
    """Reject inconsistent settings before any computation starts."""
    n = cfg["grid_n"]
    if n < 8 or n & (n - 1):
        raise ConfigFileError(f"grid_n must be a power of two >= 8, got {n}")
    for key in ("nu", "dt", "delta", "filter_lambda", "t_end"):
        if cfg[key] <= 0:
            raise ConfigFileError(f"{key} must be positive, got {cfg[key]}")
    ratio = cfg["delta"] / cfg["dt"]
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise ConfigFileError(f"delta/dt = {ratio} must be a positive integer")
    if cfg["mu"] < 0:
        raise ConfigFileError(f"mu must be non-negative, got {cfg['mu']}")
    if cfg["mode"] not in ("plain", "filtered"):
        raise ConfigFileError(f"mode must be plain or filtered, got {cfg['mode']!r}")
    m = cfg["outlier_M"]
    if m not in ("auto", "off"):
        try:
            if float(m) <= 0:
                raise ValueError
        except ValueError:
            raise ConfigFileError(f"outlier_M must be auto, off, or a positive number, got {m!r}") from None
    if cfg["epsilon"] < 0 or any(e < 0 for e in cfg["eps_list"]):
        raise ConfigFileError("noise scales must be non-negative")
    if cfg["members"] < 1:
        raise ConfigFileError("members must be >= 1")
    if not 0 < cfg["force_lambda_m"] <= cfg["force_lambda_M"]:
        raise ConfigFileError("need 0 < force_lambda_m <= force_lambda_M")
    if cfg["force_lambda_M"] > (n // 3) ** 2:
        raise ConfigFileError(f"force_lambda_M exceeds the dealiased range (n/3)^2 = {(n // 3) ** 2}")
    if any(not 0 <= p < 1 for p in cfg["bands"]):
        raise ConfigFileError("band levels must lie in [0, 1)")
    net = cfg["network"]
    if net.startswith("lattice:"):
        try:
            if int(net.split(":", 1)[1]) < 1:
                raise ValueError
        except ValueError:
            raise ConfigFileError(f"bad lattice network spec {net!r}") from None
    if cfg["window_lo"] > cfg["window_hi"]:
        raise ConfigFileError("window_lo must not exceed window_hi")
