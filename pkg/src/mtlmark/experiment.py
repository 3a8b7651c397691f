"""Experiment configuration and the train -> embed pipeline shared by CLI and scripts."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .attacks import AttackConfig
from .data import LabeledDataset, SplitSpec, gen_blobs, load_csv, split
from .errors import ConfigError
from .keys import DomainEncoder, WatermarkKey, build_wm_dataset
from .notary.raft import SimConfig
from .training import TrainConfig, embed_watermark, train_primary


@dataclass
class DataConfig:
    kind: str = "blobs"
    n_classes: int = 4
    dim: int = 16
    n_per_class: int = 250
    spread: float = 0.15
    seed: int = 0
    csv: str | None = None
    split: SplitSpec = field(default_factory=lambda: SplitSpec(0.5, 0.25, 0.25, 0))


@dataclass
class ModelConfig:
    backbone: tuple[int, ...] = (64, 64, 64)
    wm_hidden: tuple[int, ...] = (64,)
    primary_hidden: tuple[int, ...] = ()
    taps: tuple[int, ...] | None = None
    seed: int = 0


@dataclass
class KeyConfig:
    secret: str = "host"
    n: int = 256
    m: int | None = 16
    encoder: str = "vector"
    grid: tuple[int, int] | None = None

    def key(self) -> WatermarkKey:
        return WatermarkKey(self.secret.encode(), self.n, self.m)


@dataclass
class VerifyConfig:
    gamma: float = 0.7
    target: float = 1e-6
    trials: int = 200
    seed: int = 0
    mode: str = "foreign"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    key: KeyConfig = field(default_factory=KeyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list[AttackConfig] = field(default_factory=list)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    out_dir: str = "runs/default"

    def validate(self):
        k = self.key.key()
        enc = self.encoder(k)
        if enc.size != self.data.dim:
            raise ConfigError(f"encoder emits {enc.size} values but data.dim = {self.data.dim}")
        depth = len(self.model.backbone)
        taps = self.model.taps if self.model.taps is not None else range(min(3, depth))
        if any(not 0 <= t < depth for t in taps):
            raise ConfigError(f"taps {tuple(taps)} outside backbone depth {depth}")
        if not 0.5 < self.verify.gamma <= 1:
            raise ConfigError("verify.gamma must lie in (0.5, 1]")
        return self

    def encoder(self, key: WatermarkKey | None = None) -> DomainEncoder:
        key = key or self.key.key()
        if self.key.encoder == "grid":
            if not self.key.grid:
                raise ConfigError("grid encoder needs key.grid = [height, width]")
            return DomainEncoder.grid(*self.key.grid, key.m)
        return DomainEncoder.vector(self.data.dim, key.m)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc, path):
    if dataclasses.is_dataclass(doc):
        return doc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ConfigError(f"{path}: unknown fields {sorted(unknown)}")
    kw = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls, name))
        if sub is list:
            kw[name] = [_build(AttackConfig, v, f"{path}.{name}[{i}]") for i, v in enumerate(value)]
        elif sub is not None:
            kw[name] = _build(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            kw[name] = tuple(value) if name not in ("crashes",) else value
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_NESTED = {(ExperimentConfig, "data"): DataConfig, (ExperimentConfig, "model"): ModelConfig,
           (ExperimentConfig, "key"): KeyConfig, (ExperimentConfig, "train"): TrainConfig,
           (ExperimentConfig, "attacks"): list, (ExperimentConfig, "verify"): VerifyConfig,
           (ExperimentConfig, "sim"): SimConfig, (DataConfig, "split"): SplitSpec}


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cur = doc
        parts = path.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
            if not isinstance(cur, dict):
                raise ConfigError(f"override {path!r} descends into a non-object")
        cur[parts[-1]] = value
    return doc


def load_config(path=None, overrides=None) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    doc = apply_overrides(doc, overrides)
    return _build(ExperimentConfig, doc, "$").validate()


# ---- pipeline ---------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.kind == "csv":
        if not d.csv:
            raise ConfigError("data.kind = csv needs data.csv")
        if not Path(d.csv).exists():
            raise ConfigError(f"dataset file not found: {d.csv}")
        ds = load_csv(d.csv, d.dim, d.n_classes)
    elif d.kind == "blobs":
        ds = gen_blobs(d.n_classes, d.dim, d.n_per_class, d.spread, d.seed)
    else:
        raise ConfigError(f"unknown data kind {d.kind!r}")
    return split(ds, d.split)


def fresh_model(cfg: ExperimentConfig) -> nn.MultiTaskModel:
    m = cfg.model
    return nn.make_model(cfg.data.dim, m.backbone, cfg.data.n_classes, m.wm_hidden, m.taps,
                         m.primary_hidden, m.seed)


def wm_data(cfg: ExperimentConfig, key: WatermarkKey | None = None):
    key = key or cfg.key.key()
    return build_wm_dataset(key, cfg.encoder(key))


ABLATIONS = {"none": (0.0, 0.0), "rfunc": (None, 0.0), "rda": (0.0, None), "both": (None, None)}


def ablation_config(train: TrainConfig, name: str) -> TrainConfig:
    l1, l2 = ABLATIONS[name]
    return dataclasses.replace(train, lambda1=train.lambda1 if l1 is None else l1,
                               lambda2=train.lambda2 if l2 is None else l2)


@dataclass
class HostRun:
    clean: nn.MultiTaskModel
    watermarked: nn.MultiTaskModel
    primary_report: object
    embed_report: object
    train: LabeledDataset
    test: LabeledDataset
    adversary: LabeledDataset
    key: WatermarkKey
    wm: object


def run_host(cfg: ExperimentConfig, train_cfg: TrainConfig | None = None, clean=None) -> HostRun:
    """Primary training then watermark embedding, per ``cfg``."""
    tr, te, ad = load_data(cfg)
    tcfg = train_cfg or cfg.train
    if clean is None:
        clean, prep = train_primary(fresh_model(cfg), tr, tcfg, te)
    else:
        clean, prep = clean
    key = cfg.key.key()
    wm = wm_data(cfg, key)
    marked, erep = embed_watermark(clean, tr, wm.inputs, wm.labels, tcfg, te)
    return HostRun(clean, marked, prep, erep, tr, te, ad, key, wm)
