"""Flat key=value run configuration.

A config file holds one ``key = value`` per line (``#`` starts a comment);
command-line ``--key value`` flags override it. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

OUTPUT_ROOT_ENV = "PITS_OUTPUT_ROOT"

# excluded from the content hash: they change where/how fast, not what
_UNHASHED = {"output_dir", "threads"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str = ""
    labels: str = ""
    test_data: str = ""
    test_labels: str = ""
    timestamp_col: str = "auto"
    split: str = "0.6,0.2,0.2"
    eval_split: str = "test"
    window_stride: int = 1
    # shapes
    L: int = 512
    H: int = 96
    P: int = 12
    stride: int = 0  # 0 -> P for self-supervised, P//2 for supervised
    pad_mode: str = "none"
    D: int = 128
    kind: str = "mlp"
    # pretraining
    task: str = "pi+cl"
    cl: str = "auto"
    cl_level_reduce: str = "mean"
    cl_level0: bool = True
    recon_reduce: str = "mean"
    dropout: float = 0.2
    epochs: int = 100
    max_steps: int = 0
    batch_size: int = 64
    lr: float = 1e-4
    # downstream
    head: str = "forecast"
    agg: str = "max"
    classes: int = 0
    layer: str = "z2"
    head_dropout: float = 0.2
    probe_epochs: int = 10
    full_epochs: int = -1  # -1 -> 2 x probe_epochs
    lr_probe: float = 0.0  # 0 -> lr
    lr_full: float = 0.0
    probe_only: bool = False
    weights: str = ""
    # toys and experiments
    toy: str = "shift"
    toy_T: int = 0
    noise_std: float = 0.1
    slope0: float = 0.5
    amp0: float = 1.0
    period: float = 24.0
    num_classes: int = 10
    per_class: int = 20
    channels: int = 3
    seeds: str = "0,1,2"
    # gradcheck
    gc_B: int = 2
    gc_C: int = 2
    gc_N: int = 4
    gc_P: int = 3
    gc_D: int = 5
    gc_eps: float = 1e-5
    gc_tol: float = 1e-4
    gc_corrupt: str = ""
    # run
    seed: int = 0
    output_dir: str = ""
    threads: int = 1

    # ------------------------------------------------------------ derived

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in self.split.split(","))

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def ssl_stride(self) -> int:
        return self.stride or self.P

    def sup_stride(self) -> int:
        return self.stride or max(self.P // 2, 1)

    def resolved_full_epochs(self) -> int:
        return 2 * self.probe_epochs if self.full_epochs < 0 else self.full_epochs

    def out_dir(self, command: str) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command

    def hashed_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in _UNHASHED}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------ validation

    def validate(self) -> "RunConfig":
        from .model import AGGS, KINDS
        from .pretrain import TASKS

        checks = [
            (self.kind in KINDS, f"kind must be one of {KINDS}"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (self.cl in ("auto", "true", "false"), "cl must be auto, true or false"),
            (self.cl_level_reduce in ("mean", "sum"), "cl_level_reduce must be mean or sum"),
            (self.recon_reduce in ("mean", "sum"), "recon_reduce must be mean or sum"),
            (self.head in ("forecast", "classify"), "head must be forecast or classify"),
            (self.agg in AGGS, f"agg must be one of {AGGS}"),
            (self.layer in ("z1", "z2"), "layer must be z1 or z2"),
            (self.pad_mode in ("none", "replicate-last"), "pad_mode must be none or replicate-last"),
            (self.toy in ("shift", "class", "seasonal"), "toy must be shift, class or seasonal"),
            (min(self.L, self.H, self.P, self.D, self.batch_size) >= 1, "L, H, P, D, batch_size must be >= 1"),
            (self.stride >= 0 and self.window_stride >= 1, "stride >= 0 and window_stride >= 1"),
            (self.epochs >= 0 and self.probe_epochs >= 0 and self.max_steps >= 0, "epoch/step counts must be >= 0"),
            (0.0 <= self.dropout < 1.0 and 0.0 <= self.head_dropout < 1.0, "dropout rates must be in [0, 1)"),
            (self.lr > 0, "lr must be positive"),
            (self.threads >= 1, "threads must be >= 1"),
            (1e-5 <= self.gc_eps <= 1e-2, "gc_eps must be in [1e-5, 1e-2]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            ratios = self.split_ratios
            self.seed_list
        except ValueError as exc:
            raise ConfigError(f"bad list value: {exc}") from None
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
            raise ConfigError(f"split must be three positive ratios summing to 1, got {self.split}")
        if self.L < self.P and self.pad_mode == "none":
            raise ConfigError(f"L={self.L} is shorter than patch length P={self.P}")
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for key, raw in pairs.items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(argv: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs; a bare ``--flag`` means true."""
    pairs, i = {}, 0
    while i < len(argv):
        tok = argv[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        tok = tok[2:]
        if "=" in tok:
            key, value = tok.split("=", 1)
            i += 1
        elif i + 1 < len(argv) and not argv[i + 1].startswith("--"):
            key, value = tok, argv[i + 1]
            i += 2
        else:
            key, value = tok, "true"
            i += 1
        pairs[key] = value
    return pairs


def load_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    pairs = read_config_file(config_path) if config_path else {}
    pairs.update(parse_overrides(overrides))
    return parse_pairs(pairs).validate()
