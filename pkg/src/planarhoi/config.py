"""Run configuration: one versioned JSON file drives every stage.

Unknown keys anywhere in the document are rejected with a path-qualified
diagnostic, so typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .adaptor import AdaptorSizes, AdaptorTrainConfig
from .bfm import BfmSizes, BfmTrainConfig
from .domain_rand import RandSpec
from .ppo import PpoConfig
from .rewards import RewardTerm, default_registry, registry_from_json, \
    registry_to_json
from .sim import SimConfig
from .tracker import TrackerSizes, TrackerTrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Schema violation; message carries the offending key path."""


def _check_keys(d: dict, allowed: set, ctx: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys at {ctx}: {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")


def _dataclass_from_dict(cls, d: dict, ctx: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, fields, ctx)
    kwargs = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value at {ctx}: {exc}") from exc


_STAGE_SIZE_CLS = {"bfm": BfmSizes, "tracker": TrackerSizes,
                   "adaptor": AdaptorSizes}
_STAGE_TRAIN_CLS = {"bfm": BfmTrainConfig, "tracker": TrackerTrainConfig,
                    "adaptor": AdaptorTrainConfig}
_STAGE_SCALAR_KEYS = {"n_envs", "rollout_steps", "iterations",
                      "episode_seconds", "keypoint_noise_std"}


@dataclass
class RunConfig:
    seed: int = 0
    n_envs: int = 256
    out_dir: str = "runs/default"
    dataset: list = field(default_factory=list)       # clip JSON paths
    sim: SimConfig = field(default_factory=SimConfig)
    rand: RandSpec = field(default_factory=RandSpec)
    rewards: list = field(default_factory=default_registry)
    bfm: BfmTrainConfig = field(default_factory=BfmTrainConfig)
    tracker: TrackerTrainConfig = field(default_factory=TrackerTrainConfig)
    adaptor: AdaptorTrainConfig = field(default_factory=AdaptorTrainConfig)

    def to_json_dict(self) -> dict:
        def stage_dict(cfg):
            d = {"ppo": dataclasses.asdict(cfg.ppo),
                 "sizes": cfg.sizes.to_dict()}
            for k in _STAGE_SCALAR_KEYS:
                if hasattr(cfg, k):
                    d[k] = getattr(cfg, k)
            return d
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "n_envs": self.n_envs,
            "out_dir": self.out_dir,
            "dataset": list(self.dataset),
            "sim": {f.name: getattr(self.sim, f.name)
                    for f in dataclasses.fields(SimConfig)},
            "rand": self.rand.to_json_dict(),
            "rewards": registry_to_json(self.rewards),
            "stages": {name: stage_dict(getattr(self, name))
                       for name in ("bfm", "tracker", "adaptor")},
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RunConfig":
        _check_keys(d, {"version", "seed", "n_envs", "out_dir", "dataset",
                        "sim", "rand", "rewards", "stages"}, "$")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        cfg = RunConfig()
        cfg.seed = int(d.get("seed", 0))
        cfg.n_envs = int(d.get("n_envs", 256))
        cfg.out_dir = str(d.get("out_dir", "runs/default"))
        cfg.dataset = list(d.get("dataset", []))
        if "sim" in d:
            cfg.sim = _dataclass_from_dict(SimConfig, d["sim"], "$.sim")
        if "rand" in d:
            _check_keys(d["rand"], {"enabled", "robot", "object", "push"},
                        "$.rand")
            cfg.rand = RandSpec.from_json_dict(d["rand"])
        if "rewards" in d:
            try:
                cfg.rewards = registry_from_json(d["rewards"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid reward registry: {exc}") from exc
        stages = d.get("stages", {})
        _check_keys(stages, set(_STAGE_TRAIN_CLS), "$.stages")
        for name, sd in stages.items():
            _check_keys(sd, {"ppo", "sizes"} | _STAGE_SCALAR_KEYS,
                        f"$.stages.{name}")
            train_cfg = getattr(cfg, name)
            if "ppo" in sd:
                train_cfg.ppo = _dataclass_from_dict(
                    PpoConfig, sd["ppo"], f"$.stages.{name}.ppo")
            if "sizes" in sd:
                size_cls = _STAGE_SIZE_CLS[name]
                fields = {f.name for f in dataclasses.fields(size_cls)}
                _check_keys(sd["sizes"], fields, f"$.stages.{name}.sizes")
                try:
                    train_cfg.sizes = size_cls.from_dict(
                        {**size_cls().to_dict(), **sd["sizes"]})
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigError(
                        f"invalid sizes at $.stages.{name}: {exc}") from exc
            for k in _STAGE_SCALAR_KEYS:
                if k in sd and hasattr(train_cfg, k):
                    setattr(train_cfg, k, sd[k])
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        return RunConfig.from_json_dict(d)
