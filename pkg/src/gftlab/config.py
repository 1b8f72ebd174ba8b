"""Run configuration: a flat ``[run]`` section of key = value pairs."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .schedules import SCHEDULE_KINDS

TESTBEDS = ("diffusion2d", "ar-toy")
METHODS = ("cfg", "gft", "distill", "cca")


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    testbed: str = "diffusion2d"
    method: str = "gft"
    seed: int = 0
    steps: int = 20000
    batch_size: int = 256
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    dropout: float = 0.10
    beta: str = "uniform"
    hidden: tuple = (128, 128, 128)
    emb_dim: int = 128
    fourier_pairs: int = 4
    beta_hidden: int = 64
    model: str = "net"
    schedule_kind: str = "constant"
    schedule_alpha: float = 1.0
    schedule_beta0: float = 1.0
    ema: bool = True
    ema_decay: float = 0.9999
    eval_ema: bool = False
    # diffusion testbed
    mixture_radius: float = 2.0
    mixture_tau: float = 0.35
    ddim_steps: int = 50
    s_min: float = 0.0
    s_max: float = 3.0
    teacher: str = "oracle"
    # discrete testbed
    vocab: int = 4
    length: int = 3
    num_classes: int = 2
    skew: float = 2.0
    joint_seed: int = 0
    ar_hidden: tuple = (128, 128)
    ar_emb_dim: int = 32
    cca_s: float = 1.0
    reference: str = "exact"
    # evaluation and output
    eval_betas: tuple = (1.0, 0.5, 0.25, 0.1)
    eval_ts: tuple = (0.3, 0.6)
    grid_half_width: float = 4.0
    grid_points: int = 41
    eval_class: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.testbed in TESTBEDS, f"testbed must be one of {TESTBEDS}")
        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(not (self.testbed == "diffusion2d" and self.method == "cca"),
             "cca needs exact likelihoods and runs on ar-toy only")
        need(not (self.testbed == "ar-toy" and self.method == "distill"),
             "guidance distillation runs on diffusion2d only")
        need(0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        need(self.steps >= 0 and self.batch_size >= 2, "steps >= 0 and batch_size >= 2 required")
        need(self.lr > 0, "lr must be positive")
        need(self.lr_schedule in ("constant", "cosine"), "lr_schedule must be constant or cosine")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        if self.beta != "uniform":
            try:
                b = float(self.beta)
            except ValueError:
                raise ConfigError("beta must be 'uniform' or a number in (0, 1]") from None
            need(0.0 < b <= 1.0, "fixed beta must lie in (0, 1]")
        need(len(self.hidden) >= 1 and all(h > 0 for h in self.hidden), "hidden widths must be positive")
        need(len(self.ar_hidden) >= 1 and all(h > 0 for h in self.ar_hidden), "ar_hidden widths must be positive")
        need(self.model in ("net", "tabular"), "model must be net or tabular")
        need(not (self.model == "tabular" and self.testbed != "ar-toy"), "tabular model exists only on ar-toy")
        need(self.schedule_kind in SCHEDULE_KINDS, f"schedule_kind must be one of {SCHEDULE_KINDS}")
        need(self.schedule_alpha >= 0 and 0 < self.schedule_beta0 <= 1, "bad schedule parameters")
        need(0.0 <= self.ema_decay < 1.0, "ema_decay must lie in [0, 1)")
        need(self.ddim_steps >= 1, "ddim_steps must be >= 1")
        need(0 <= self.s_min <= self.s_max, "need 0 <= s_min <= s_max")
        need(self.vocab >= 2 and self.length >= 1 and self.num_classes >= 2 and self.skew > 0, "bad toy joint")
        need(self.vocab**self.length <= 10**6, "V^N exceeds the enumeration budget")
        need(self.cca_s > 0, "cca_s must be positive")
        need(all(0 < b <= 1 for b in self.eval_betas), "eval_betas must lie in (0, 1]")
        need(all(0 <= t <= 1 for t in self.eval_ts), "eval_ts must lie in [0, 1]")
        need(self.grid_points >= 2 and self.grid_half_width > 0, "bad grid")
        n_cls = 3 if self.testbed == "diffusion2d" else self.num_classes
        need(0 <= self.eval_class < n_cls, "eval_class out of range")
        need(self.log_every >= 1 and self.checkpoint_every >= 0, "bad logging cadence")

    @property
    def fixed_beta(self):
        return None if self.beta == "uniform" else float(self.beta)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    def to_ini(self) -> str:
        lines = ["[run]"]
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        cfg = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


_PARSERS = {int: int, float: float, str: str, bool: _bool}


def _convert(name, raw):
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    default = f.default
    try:
        if isinstance(default, tuple):
            return _floats(raw) if name in ("eval_betas", "eval_ts") else _ints(raw)
        return _PARSERS[type(default)](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text if "[" in text.split("\n", 1)[0] else "[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    for section in parser.sections():
        if section != "run":
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def code_hash() -> str:
    """SHA-256 over this package's source files, in name order."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]
