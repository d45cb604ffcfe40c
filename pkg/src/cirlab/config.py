"""Run configuration: nested dataclasses, file loading and dotted flag overrides.

Resolution order is flags > config file > defaults. A config file is JSON or YAML
holding the same nested structure as :class:`RunConfig`, e.g.::

    seed: 3
    train: {steps: 200, learning_rate: 0.001}
    paths: {workdir: runs/a, embeddings: data/emb.jsonl}
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from cirlab.evaluation import EvalConfig
from cirlab.filtering import FilterParams
from cirlab.io import config_hash
from cirlab.mining import MinerParams
from cirlab.model import ModelConfig
from cirlab.providers import ProviderConfig
from cirlab.training import TrainConfig

PROVIDER_KINDS = ("caption", "instruction", "embedding")


@dataclass
class ProvidersConfig:
    # "mock" uses the deterministic offline providers; "http" uses the per-kind endpoints
    mode: str = "mock"
    max_workers: int = 4
    mock_embed_dim: int = 64
    caption: ProviderConfig = field(default_factory=ProviderConfig)
    instruction: ProviderConfig = field(default_factory=ProviderConfig)
    embedding: ProviderConfig = field(default_factory=ProviderConfig)

    def __post_init__(self):
        if self.mode not in ("mock", "http"):
            raise ValueError("providers.mode must be 'mock' or 'http'")
        if self.max_workers < 1:
            raise ValueError("providers.max_workers must be at least 1")


@dataclass
class EncoderConfig:
    """Toy frozen encoders used when no encoder spec file is given."""
    d_token: int | None = None
    d_out: int | None = None
    n_buckets: int = 64


@dataclass
class PathsConfig:
    workdir: str = "runs/default"
    embeddings: str | None = None
    triplet_embeddings: str | None = None
    triplets: str | None = None
    cache: str | None = None
    checkpoint: str | None = None
    encoders: str | None = None
    queries: str | None = None
    query_format: str = "generic"
    gallery: str | None = None
    references: str | None = None

    def out(self, name: str) -> Path:
        return Path(self.workdir) / name


@dataclass
class RunConfig:
    seed: int = 0
    miner: MinerParams = field(default_factory=MinerParams)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    filter: FilterParams = field(default_factory=FilterParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def section_hash(self, *sections: str, **extra) -> str:
        """Hash of the named sections plus the seed; paths never take part."""
        d = self.to_dict()
        return config_hash({"seed": self.seed, **{s: d[s] for s in sections}, **extra})


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def build(cls, data: dict | None):
    """Instantiate a (nested) dataclass from a plain dict, rejecting unknown keys."""
    data = dict(data or {})
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if _is_dataclass_type(tp):
            if not isinstance(value, dict):
                raise ValueError(f"{cls.__name__}.{name} must be a mapping")
            value = build(tp, value)
        kwargs[name] = value
    return cls(**kwargs)


def deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


# --- flags ----------------------------------------------------------------

@dataclass(frozen=True)
class FlagSpec:
    dotted: str
    kind: str  # "int" | "float" | "str" | "bool" | "list" | "dict"
    optional: bool


def _flag_kind(tp) -> tuple[str, bool]:
    optional = False
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional = len(args) < len(typing.get_args(tp))
        tp = args[0]
        origin = typing.get_origin(tp)
    if tp is bool:
        return "bool", optional
    if tp in (int, float, str):
        return tp.__name__, optional
    if tp is tuple or origin is tuple or tp is list or origin is list:
        return "list", optional
    if tp is dict or origin is dict:
        return "dict", optional
    return "str", optional


def flag_specs(cls=RunConfig, prefix: str = "") -> list[FlagSpec]:
    """One flag per leaf field, named by its dotted path (``train.steps``)."""
    specs = []
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        dotted = f"{prefix}{f.name}"
        if _is_dataclass_type(tp):
            specs.extend(flag_specs(tp, dotted + "."))
        elif dotted == "train.seed":
            continue  # the trainer always receives the run seed
        else:
            kind, optional = _flag_kind(tp)
            specs.append(FlagSpec(dotted, kind, optional))
    return specs


def parse_flag_value(spec: FlagSpec, raw) -> Any:
    if spec.optional and raw in ("none", "null", "None"):
        return None
    if spec.kind == "int":
        return int(raw)
    if spec.kind == "float":
        return float(raw)
    if spec.kind == "bool":
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"--{spec.dotted}: expected a boolean, got {raw!r}")
    if spec.kind == "list":
        return [_scalar(x) for x in raw]
    if spec.kind == "dict":
        value = json.loads(raw)
        if not isinstance(value, dict):
            raise ValueError(f"--{spec.dotted}: expected a JSON object")
        return value
    return raw


def _scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def nest(dotted: dict[str, Any]) -> dict:
    out: dict = {}
    for key, value in dotted.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def resolve(config_file=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = load_config_file(config_file) if config_file else {}
    data = deep_merge(data, nest(overrides or {}))
    cfg = build(RunConfig, data)
    # one master seed drives every stage
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg
