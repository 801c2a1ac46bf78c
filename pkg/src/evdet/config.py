"""Run configuration: one JSON document, optionally layered on a bundled preset.

A document may name a base with ``"include"`` (a bundled preset name or a
path relative to the including file).  The base is merged key by key, with
the including document winning.  The resolved configuration hashes to a
stable digest that every report carries.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

from .datasets import ToyTaskCfg
from .hwsim import KernelCostModel, ProcessorSpec
from .losses import LossCfg
from .netspec import NetworkSpec, SpecError, preset
from .train import TrainCfg

PRESETS = ("toy-64", "paper-1mpx", "paper-gen1")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """A configuration field is missing, mistyped or out of range; the message names it."""


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_preset(name: str) -> dict:
    try:
        text = resources.files("evdet.presets").joinpath("configs", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"include: unknown preset {name!r} (known: {', '.join(PRESETS)})") from None
    return json.loads(text)


def resolve(doc: dict, base_dir: Path | None = None, _seen=()) -> dict:
    """Expand ``include`` chains into one flat document."""
    doc = dict(doc)
    inc = doc.pop("include", None)
    if inc is None:
        return doc
    if not isinstance(inc, str):
        raise ConfigError("include: must be a preset name or a file path")
    if inc in _seen:
        raise ConfigError(f"include: cycle through {inc!r}")
    path = (base_dir or Path.cwd()) / inc
    if inc in PRESETS and not path.exists():
        parent, parent_dir = _read_preset(inc), None
    elif path.exists():
        parent, parent_dir = _load_json(path), path.parent
    else:
        parent, parent_dir = _read_preset(inc), None
    return deep_merge(resolve(parent, parent_dir, _seen + (inc,)), doc)


def _load_json(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class EvalCfg:
    min_diag: float = 0.0
    min_side: float = 0.0
    score_thresh: float = 0.05
    nms_iou: float = 0.45
    top_k: int = 200
    groups: int = 5


@dataclass
class HwsimCfg:
    cores: int | None = 256  # None: unlimited
    bits: int = 16
    frames: int = 1
    processor: ProcessorSpec = ProcessorSpec()
    cost_model: KernelCostModel = KernelCostModel()


@dataclass
class RunConfig:
    network: str
    dataset: dict
    train: TrainCfg
    loss: LossCfg
    eval: EvalCfg
    hwsim: HwsimCfg
    seed: int
    out: str | None
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def network_spec(self) -> NetworkSpec:
        try:
            if self.network.endswith(".json"):
                return NetworkSpec.load(self.network)
            return preset(self.network)
        except (SpecError, FileNotFoundError) as e:
            raise ConfigError(f"network: {e}") from None

    def toy_cfg(self, split: str) -> ToyTaskCfg:
        if self.dataset.get("kind") != "toy":
            raise ConfigError(f"dataset.kind: {self.dataset.get('kind')!r} has no synthetic {split} split")
        if split not in SPLITS:
            raise ConfigError(f"dataset: unknown split {split!r}")
        part = {**self.dataset.get("common", {}), **self.dataset.get(split, {})}
        if "shapes" in part:
            part["shapes"] = tuple(part["shapes"])
        cfg = _build(ToyTaskCfg, part, f"dataset.{split}")
        try:
            return cfg.validate()
        except ValueError as e:
            raise ConfigError(f"dataset.{split}: {e}") from None


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: must be an object")
    names = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in names:
            raise ConfigError(f"{where}.{k}: unknown field")
        default = getattr(cls(), k) if _has_defaults(cls) else None
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{k}: expected true/false, got {v!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{k}: expected a number, got {v!r}")
            if isinstance(default, int) and not isinstance(default, bool) and v != int(v):
                raise ConfigError(f"{where}.{k}: expected an integer, got {v!r}")
            d = {**d, k: type(default)(v)}
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _has_defaults(cls):
    try:
        cls()
        return True
    except TypeError:
        return False


def _hwsim(d: dict) -> HwsimCfg:
    d = dict(d)
    cores = d.pop("cores", 256)
    if cores == "unlimited" or cores is None:
        cores = None
    elif isinstance(cores, bool) or not isinstance(cores, int) or cores < 1:
        raise ConfigError(f"hwsim.cores: expected a positive integer or \"unlimited\", got {cores!r}")
    bits = d.pop("bits", 16)
    frames = d.pop("frames", 1)
    for k, v in (("bits", bits), ("frames", frames)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"hwsim.{k}: expected a positive integer, got {v!r}")
    proc = {"core_count": cores or ProcessorSpec().core_count}
    if "mem_per_core_bits" in d:
        proc["mem_per_core_bits"] = d.pop("mem_per_core_bits")
    if "ns_per_instruction" in d:
        proc["ns_per_instruction"] = d.pop("ns_per_instruction")
    cm = dict(d.pop("cost_model", {}))
    if d:
        raise ConfigError(f"hwsim.{sorted(d)[0]}: unknown field")
    energy = cm.pop("energy_pj", None)
    if energy is not None:
        known = dict(KernelCostModel().energy_pj)
        bad = set(energy) - set(known)
        if bad:
            raise ConfigError(f"hwsim.cost_model.energy_pj.{sorted(bad)[0]}: unknown instruction class")
        cm["energy_pj"] = tuple((k, float(energy.get(k, v))) for k, v in known.items())
    return HwsimCfg(cores, bits, frames, _build(ProcessorSpec, proc, "hwsim"),
                    _build(KernelCostModel, cm, "hwsim.cost_model"))


def from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    raw = resolve(doc, base_dir)
    known = {"network", "dataset", "train", "loss", "eval", "hwsim", "seed", "out"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown top-level field")
    if not isinstance(raw.get("network"), str):
        raise ConfigError("network: expected a preset name or a path to a spec file")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    ds = raw.get("dataset", {"kind": "toy"})
    if not isinstance(ds, dict) or ds.get("kind") not in ("toy", "files"):
        raise ConfigError("dataset.kind: expected \"toy\" or \"files\"")
    tr = dict(raw.get("train", {}))
    if "betas" in tr:
        tr["betas"] = tuple(tr["betas"])
    train = _build(TrainCfg, tr, "train")
    train = replace(train, seed=seed)
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    cfg = RunConfig(raw["network"], ds, train, _build(LossCfg, raw.get("loss", {}), "loss"),
                    _build(EvalCfg, raw.get("eval", {}), "eval"), _hwsim(raw.get("hwsim", {})), seed,
                    raw.get("out"), raw)
    if not 0 < cfg.eval.nms_iou <= 1 or cfg.eval.top_k < 1 or cfg.eval.groups < 1:
        raise ConfigError("eval: need 0 < nms_iou <= 1, top_k >= 1 and groups >= 1")
    if cfg.eval.min_diag < 0 or cfg.eval.min_side < 0:
        raise ConfigError("eval.min_diag/min_side: must be non-negative")
    return cfg


def load_config(src=None, overrides: dict | None = None) -> RunConfig:
    """Load a config file or bundled preset name; ``None`` gives the ``toy-64`` preset."""
    if src is None:
        doc, base = {"include": "toy-64"}, None
    elif str(src) in PRESETS and not Path(str(src)).exists():
        doc, base = {"include": str(src)}, None
    else:
        p = Path(src)
        if not p.exists():
            raise ConfigError(f"config: no such file {p}")
        doc, base = _load_json(p), p.parent
    if overrides:
        doc = deep_merge(doc, overrides)
    return from_dict(doc, base)
