"""Declarative run configuration (JSON) and its canonical hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from gainlab.adapters import AdapterOptions, Method
from gainlab.corpus import make_domain_suite, load_domain
from gainlab.model import ModelConfig
from gainlab.optimize import PretrainConfig, TrainConfig

PROTOCOLS = ("single", "sequential", "orderings", "lr_sweep", "landscape", "subspace", "decompose")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    n_domains: int = 4
    master_seed: int = 0
    ood: bool = False
    token_budget: int = 20_000
    split_fraction: float = 0.9
    files: tuple[str, ...] = ()  # real text files; replaces the synthetic suite when given

    def build(self, context_len: int):
        if self.files:
            return [load_domain(f, self.split_fraction, context_len) for f in self.files]
        return make_domain_suite(self.n_domains, self.master_seed, self.ood, self.token_budget,
                                 self.split_fraction, context_len)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    suite: SuiteConfig = SuiteConfig()
    pretrain: PretrainConfig = PretrainConfig()
    method: str = "gain_ffn"
    adapter: AdapterOptions = AdapterOptions()
    train: TrainConfig = TrainConfig()
    protocol: str = "sequential"
    cycles: int = 1
    seeds: tuple[int, ...] = (0, 1, 2)
    orderings: int | tuple[tuple[str, ...], ...] = 8
    learning_rates: tuple[float, ...] = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    grid: tuple[float, ...] = (0.0, 0.5, 1.0)
    k: int = 10
    layers: tuple[int, ...] | None = None
    output_dir: str = "runs/default"
    pretrained: str | None = None  # checkpoint path; defaults to <output_dir>/pretrained.ckpt
    precision: str = "float32"
    halt_on_divergence: bool = False

    def __post_init__(self):
        try:
            Method.parse(self.method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    # ---- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adapter"] = self.adapter.to_dict()
        d["train"] = self.train.to_dict()
        return _plain(d)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "suite" in d:
                s = dict(d["suite"])
                s["files"] = tuple(s.get("files", ()))
                d["suite"] = SuiteConfig(**s)
            if "pretrain" in d:
                d["pretrain"] = PretrainConfig(**d["pretrain"])
            if "adapter" in d:
                d["adapter"] = AdapterOptions.from_dict(d["adapter"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            for key in ("seeds", "learning_rates", "alphas", "grid"):
                if key in d:
                    d[key] = tuple(d[key])
            if d.get("layers") is not None:
                d["layers"] = tuple(d["layers"])
            if isinstance(d.get("orderings"), list):
                d["orderings"] = tuple(tuple(o) for o in d["orderings"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def canonical_hash(self) -> str:
        """sha256 of the canonical JSON without the two filesystem locations."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("pretrained")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
