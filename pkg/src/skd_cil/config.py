"""Experiment configuration: presets, dotted key-value files, overrides and hashing.

Config files are flat ``section.key = value`` lines (valid TOML), e.g.::

    dataset = "digits"
    skd.epochs = 20
    cil.lr_drops = [20, 30]
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import tomli

from .cil import CilTrainConfig, RunFlags
from .data import DatasetSpec, get_spec
from .delegate import SkdTrainConfig
from .losses import ExploreWeights

FLAG_NAMES = ("no_skd", "no_alw", "no_cat", "no_div", "no_rfeature", "no_helper_bn",
              "explore_updates_delegator_only", "no_fc")


@dataclass
class AblationFlags:
    no_skd: bool = False
    no_alw: bool = False
    no_cat: bool = False
    no_div: bool = False
    no_rfeature: bool = False
    no_helper_bn: bool = False
    explore_updates_delegator_only: bool = False
    no_fc: bool = False


@dataclass
class ExperimentConfig:
    name: str = "skd"
    dataset: str = "digits"
    data_root: Optional[str] = None
    arch: str = "desk-cnn"
    num_incremental: int = 2
    seed: int = 0
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 64
    out_dir: str = "runs/skd"
    skd: SkdTrainConfig = field(default_factory=SkdTrainConfig)
    cil: CilTrainConfig = field(default_factory=CilTrainConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)

    # -- derived pieces -------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        return get_spec(self.dataset, self.data_root)

    def resolved_skd(self) -> SkdTrainConfig:
        cfg = copy.deepcopy(self.skd)
        w = cfg.explore_weights
        cfg.explore_weights = ExploreWeights(
            lambda_exp=w.lambda_exp,
            category=0.0 if self.flags.no_cat else w.category,
            diversity=0.0 if self.flags.no_div else w.diversity,
            feature_stats=0.0 if self.flags.no_rfeature else w.feature_stats,
        )
        if self.flags.no_helper_bn:
            cfg.helper_bn = False
        if self.flags.explore_updates_delegator_only:
            cfg.explore_updates_delegator_only = True
        return cfg

    def run_flags(self) -> RunFlags:
        return RunFlags(no_skd=self.flags.no_skd, no_alw=self.flags.no_alw, no_fc=self.flags.no_fc)

    # -- flat representation --------------------------------------------------

    def to_flat(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "skd":
                d = asdict(value)
                weights = d.pop("explore_weights")
                out.update({f"skd.{k}": v for k, v in d.items()})
                out.update({f"skd.explore_weights.{k}": v for k, v in weights.items()})
            elif f.name == "cil":
                out.update({f"cil.{k}": v for k, v in value.to_dict().items()})
            elif f.name == "flags":
                out.update({f"flags.{k}": v for k, v in asdict(value).items()})
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: Dict[str, Any], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(base) if base is not None else cls()
        top, skd, weights, cil, flags = {}, {}, {}, {}, {}
        for key, value in flat.items():
            if key.startswith("skd.explore_weights."):
                weights[key.split(".", 2)[2]] = value
            elif key.startswith("skd."):
                skd[key[4:]] = value
            elif key.startswith("cil."):
                cil[key[4:]] = value
            elif key.startswith("flags."):
                flags[key[6:]] = value
            elif "." in key:
                raise KeyError(f"unknown config section in {key!r}")
            else:
                top[key] = value
        _check_keys(top, {f.name for f in fields(cls)} - {"skd", "cil", "flags"}, "")
        _check_keys(skd, {f.name for f in fields(SkdTrainConfig)} - {"explore_weights"}, "skd.")
        _check_keys(weights, {f.name for f in fields(ExploreWeights)}, "skd.explore_weights.")
        _check_keys(cil, {f.name for f in fields(CilTrainConfig)}, "cil.")
        _check_keys(flags, set(FLAG_NAMES), "flags.")
        for k, v in top.items():
            setattr(cfg, k, v)
        skd_d = asdict(cfg.skd)
        skd_d["explore_weights"] = ExploreWeights(**{**skd_d["explore_weights"], **weights})
        skd_d.update(skd)
        cfg.skd = SkdTrainConfig(**skd_d)
        cfg.cil = CilTrainConfig(**{**cfg.cil.to_dict(), **cil})
        cfg.flags = AblationFlags(**{**asdict(cfg.flags), **flags})
        return cfg

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_flat().items():
            if value is None:
                lines.append(f"# {key} = (unset)")
            else:
                lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        return cls.from_flat(parse_flat(Path(path).read_text()), base)

    def with_overrides(self, assignments: Iterable[str]) -> "ExperimentConfig":
        flat = {}
        for item in assignments:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            flat[key.strip()] = parse_value(raw.strip())
        return type(self).from_flat(flat, self)

    def snapshot(self) -> Dict[str, Any]:
        return self.to_flat()

    def config_hash(self) -> str:
        return snapshot_hash(self.snapshot())


def _check_keys(given: dict, allowed: set, prefix: str) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def _flatten(d: dict, prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def parse_flat(text: str) -> Dict[str, Any]:
    return _flatten(tomli.loads(text))


def parse_value(raw: str) -> Any:
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


# keys that say where results go, not how they are produced
_UNHASHED = ("out_dir",)


def snapshot_hash(snapshot: Dict[str, Any]) -> str:
    kept = {k: v for k, v in snapshot.items() if k not in _UNHASHED}
    canon = json.dumps(kept, sort_keys=True, default=list)
    return hashlib.sha256(canon.encode()).hexdigest()


def cifar100_config() -> ExperimentConfig:
    """Full-scale hyperparameters (CIFAR-100, 32-layer ResNet)."""
    return ExperimentConfig(
        name="cifar100-5task", dataset="cifar100", arch="resnet32", num_incremental=5, seed=1993,
        pretrain_epochs=160, pretrain_lr=0.1, pretrain_batch_size=128, out_dir="runs/cifar100",
        skd=SkdTrainConfig(), cil=CilTrainConfig(batch_size_real=128),
    )


def desk_config() -> ExperimentConfig:
    """CPU-sized run on the bundled digits set: base 5 classes plus 2 incremental tasks."""
    return ExperimentConfig(
        name="desk", dataset="digits", arch="desk-cnn", num_incremental=2, seed=0,
        pretrain_epochs=30, pretrain_lr=0.05, pretrain_batch_size=64, out_dir="runs/desk",
        skd=SkdTrainConfig(epochs=20, steps_per_epoch=10, lr_drop_every=10, pseudo_batch_size=128,
                           generator_width=32),
        cil=CilTrainConfig(epochs=40, lr_drops=(20, 30), batch_size_real=64, beta=0.25),
    )


PRESETS = {"desk": desk_config, "cifar100": cifar100_config}
