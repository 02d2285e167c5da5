"""Run configuration: one JSON file, validated into typed blocks.

Layout::

    {
      "extends": "base.json",          # optional, deep-merged underneath
      "seed": 0,
      "output_dir": "out",
      "geometry": {...},               # FanBeamGeometry fields
      "dose": {"intensity": 1e3, "sigma_e2": 10},
      "phantom": {"kind": "shepp_logan", "size": 64, ...},
      "method": "proposed",            # fbp | pwls_tv | dip_tv | proposed
      "network": {...},                # NetworkSpec fields
      "train": {...},                  # TrainConfig fields
      "admm": {...},                   # AdmmConfig fields
      "fbp": {"filter": "ramp"},
      "methods": {"dip_tv": {"train": {"lr": 1e-2}}},   # per-method overrides
      "benchmark": {...},
      "display": {...},
      "inputs": {"sinogram": null, "reference": null, "image": null}
    }

Per-method entries under ``methods`` are merged over the base blocks when
that method runs, which is how sweeps share one file. Errors carry the file,
line and dotted field path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bayes import TrainConfig
from .network import NetworkSpec
from .projector import FanBeamGeometry
from .sim import PHANTOM_KINDS, DoseModel
from .tvsolver import AdmmConfig

METHODS = ("fbp", "pwls_tv", "dip_tv", "proposed")
DOSE_LADDER = (1e3, 5e3, 1e4, 5e4)
ENV_OUTPUT_ROOT = "LDCTBAYES_OUTPUT_ROOT"
ENV_THREADS = "LDCTBAYES_THREADS"


class ConfigError(ValueError):
    def __init__(self, message: str, source: str | None = None, line: int | None = None,
                 path: str | None = None):
        self.source, self.line, self.path = source, line, path
        where = source or "<config>"
        if line is not None:
            where += f":{line}"
        if path:
            message = f"field '{path}': {message}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class PhantomConfig:
    kind: str = "shepp_logan"
    size: int = 64
    seed: int = 7
    attenuation_max: float = 0.2
    oversample: int = 4

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"kind must be one of {PHANTOM_KINDS}")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if not self.attenuation_max > 0:
            raise ValueError("attenuation_max must be positive")


@dataclass(frozen=True)
class FbpConfig:
    filter: str = "ramp"

    def __post_init__(self):
        if self.filter not in ("ramp", "hann"):
            raise ValueError("filter must be 'ramp' or 'hann'")


@dataclass(frozen=True)
class DisplayConfig:
    units: str = "native"               # native | hu
    mu_water: float | None = None       # needed for HU output
    window: tuple | None = None         # None: min/max of the reference (native) or [-150, 200] HU

    def __post_init__(self):
        if self.units not in ("native", "hu"):
            raise ValueError("units must be 'native' or 'hu'")
        if self.units == "hu" and not (self.mu_water and self.mu_water > 0):
            raise ValueError("units 'hu' needs a positive mu_water")
        if self.window is not None:
            w = tuple(float(v) for v in self.window)
            if len(w) != 2 or not w[1] > w[0]:
                raise ValueError("window must be [low, high] with high > low")
            object.__setattr__(self, "window", w)

    def resolved_window(self) -> tuple | None:
        if self.window is not None:
            return self.window
        return (-150.0, 200.0) if self.units == "hu" else None


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple = METHODS
    doses: tuple = (1e3,)
    seeds: tuple | None = None          # repeat seeds; default [global seed]
    alpha: dict = field(default_factory=dict)   # method -> scalar or {dose: value}
    zoom_box: tuple | None = None       # (row, col, height, width) of the inset region
    record_wall_time: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "doses", tuple(float(d) for d in self.doses))
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
            if not self.seeds:
                raise ValueError("seeds must not be empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {bad or '[]'}")
        if not self.doses or any(not d > 0 for d in self.doses):
            raise ValueError("doses must be positive")
        for m in self.alpha:
            if m not in METHODS:
                raise ValueError(f"alpha given for unknown method {m!r}")
        if self.zoom_box is not None and len(self.zoom_box) != 4:
            raise ValueError("zoom_box is [row, col, height, width]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def alpha_for(self, method: str, dose: float) -> float | None:
        spec = self.alpha.get(method)
        if spec is None:
            return None
        if isinstance(spec, dict):
            for key, value in spec.items():
                if float(key) == float(dose):
                    return float(value)
            return None
        return float(spec)


@dataclass(frozen=True)
class InputsConfig:
    phantom: str | None = None
    sinogram: str | None = None
    reference: str | None = None
    image: str | None = None


# block name -> dataclass; order fixes the canonical serialisation
BLOCKS = {
    "geometry": FanBeamGeometry,
    "dose": DoseModel,
    "phantom": PhantomConfig,
    "network": NetworkSpec,
    "train": TrainConfig,
    "admm": AdmmConfig,
    "fbp": FbpConfig,
    "benchmark": BenchmarkConfig,
    "display": DisplayConfig,
    "inputs": InputsConfig,
}
TOP_LEVEL = {"extends", "seed", "output_dir", "method", "methods"} | set(BLOCKS)


@dataclass(frozen=True)
class RunConfig:
    raw: dict                       # merged JSON, before per-method overrides
    seed: int
    output_dir: Path
    method: str
    source: str = "<config>"
    text: str = ""

    def block(self, name: str, method: str | None = None):
        """Typed block ``name``, with ``methods.<method>`` overrides applied."""
        data = copy.deepcopy(self.raw.get(name, {}))
        path_prefix = name
        if method is not None:
            over = self.raw.get("methods", {}).get(method, {}).get(name)
            if over is not None:
                data = _deep_merge(data, over)
                path_prefix = f"methods.{method}.{name}"
        return _build_block(name, data, self.source, self.text, path_prefix)

    def train_config(self, method: str) -> TrainConfig:
        cfg = self.block("train", method)
        changes = {}
        if "seed" not in self.raw.get("train", {}):
            changes["seed"] = self.seed
        if method in ("dip_tv", "proposed"):
            changes["mode"] = method
        if changes:
            cfg = TrainConfig(**{**cfg.to_dict(), **changes})
        return cfg

    def canonical(self) -> str:
        return json.dumps({k: v for k, v in self.raw.items() if k != "extends"},
                          sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("alpha",):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def locate(text: str, path: str) -> int | None:
    """Best-effort line number of the key at dotted ``path`` in JSON ``text``."""
    pos = 0
    line = None
    for key in path.split("."):
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, pos)
        if m is None:
            return line
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _build_block(name: str, data, source: str, text: str, path: str | None = None):
    path = path or name
    cls = BLOCKS[name]
    if not isinstance(data, dict):
        raise ConfigError("expected an object", source, locate(text, path), path)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown field (allowed: {', '.join(sorted(known))})",
                              source, locate(text, f"{path}.{key}"), f"{path}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        culprit = _isolate_field(cls, data) or _guess_field(str(exc), data)
        full = f"{path}.{culprit}" if culprit else path
        raise ConfigError(str(exc), source, locate(text, full), full) from None


def _isolate_field(cls, data: dict) -> str | None:
    """First key that fails validation on its own, against defaults elsewhere."""
    for key, value in data.items():
        try:
            cls(**{key: value})
        except (TypeError, ValueError):
            return key
    return None


def _guess_field(message: str, data: dict) -> str | None:
    for key in sorted(data, key=len, reverse=True):
        if re.search(r"\b" + re.escape(key) + r"\b", message):
            return key
    return None


def _load_json(path: Path, seen: tuple = ()) -> tuple[dict, str]:
    if path in seen:
        raise ConfigError("circular 'extends'", str(path))
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", str(path), exc.lineno) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", str(path), 1)
    parent = data.get("extends")
    if parent is not None:
        if not isinstance(parent, str):
            raise ConfigError("must be a file path", str(path), locate(text, "extends"), "extends")
        base, _ = _load_json((path.parent / parent).resolve(), seen + (path,))
        data = _deep_merge(base, data)
    return data, text


def parse_config(data: dict, source: str = "<config>", text: str = "",
                 seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    """Validate a merged config dict; ``seed``/``output_dir`` override the file."""
    data = copy.deepcopy(data)
    data.pop("extends", None)
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown top-level field (allowed: {', '.join(sorted(TOP_LEVEL))})",
                              source, locate(text, key), key)
    if seed is not None:
        data["seed"] = int(seed)
    gseed = data.get("seed", 0)
    if not isinstance(gseed, int) or isinstance(gseed, bool) or gseed < 0:
        raise ConfigError("must be a non-negative integer", source, locate(text, "seed"), "seed")
    method = data.get("method", "proposed")
    if method not in METHODS:
        raise ConfigError(f"must be one of {METHODS}", source, locate(text, "method"), "method")
    methods = data.get("methods", {})
    if not isinstance(methods, dict):
        raise ConfigError("expected an object", source, locate(text, "methods"), "methods")
    for m, over in methods.items():
        if m not in METHODS:
            raise ConfigError(f"unknown method (allowed: {METHODS})", source,
                              locate(text, f"methods.{m}"), f"methods.{m}")
        if not isinstance(over, dict) or any(k not in BLOCKS for k in over):
            bad = next((k for k in over if k not in BLOCKS), None) if isinstance(over, dict) else None
            p = f"methods.{m}.{bad}" if bad else f"methods.{m}"
            raise ConfigError("overrides must map block names to objects", source, locate(text, p), p)
    out = output_dir or data.get("output_dir") or "out"
    root = os.environ.get(ENV_OUTPUT_ROOT)
    out_path = Path(root) / out if root and not Path(out).is_absolute() else Path(out)
    cfg = RunConfig(raw=data, seed=gseed, output_dir=out_path, method=method, source=source, text=text)
    # validate every block (and every override) up front
    for name in BLOCKS:
        cfg.block(name)
        for m in methods:
            if name in methods[m]:
                cfg.block(name, m)
    return cfg


def load_config(path: str | Path | None, seed: int | None = None,
                output_dir: str | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, seed=seed, output_dir=output_dir)
    path = Path(path)
    data, text = _load_json(path.resolve())
    return parse_config(data, str(path), text, seed, output_dir)


def env_threads() -> int | None:
    value = os.environ.get(ENV_THREADS)
    if value is None:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1")
    return n
