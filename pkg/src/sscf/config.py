"""Flat run configuration with JSON round-trip and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .fewshot.training import TrainConfig
from .model import ModelConfig
from .spiking import LifParams

# JSON keys that differ from field names ("lambda" is a Python keyword)
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class RunConfig:
    # data
    data_root: str = ""  # empty: generate synthetic glyphs in memory
    data_kind: str = "images"
    split_file: str = ""
    resolution: int = 32
    synth_classes: int = 40
    synth_per_class: int = 20
    synth_seed: int = 0
    n_train_classes: int = 30
    n_val_classes: int = 0
    # neuron and network
    timesteps: int = 2
    tau: float = 0.5
    v_th: float = 1.0
    surrogate_width: float = 1.0
    backbone: str = "vggsnn"
    channel_divisor: int = 8
    compact_channels: int = 64
    hidden_channels: int = 16
    gamma: float = 5.0
    use_sfe: bool = True
    use_cfc: bool = True
    # objective and optimisation
    lam: float = 0.7
    tau_c: float = 0.2
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    episodes: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    # evaluation
    eval_episodes: int = 200
    eval_seed: int = 1
    noise_rate: float = 0.0
    noise_queries_only: bool = False
    probe_episodes: int = 10
    log_every: int = 100

    # -- validation --------------------------------------------------------
    def problems(self) -> list[str]:
        p = []

        def need(cond, msg):
            if not cond:
                p.append(msg)

        need(self.data_kind in ("images", "events"), f"data_kind must be 'images' or 'events', got {self.data_kind!r}")
        need(self.resolution >= 16, f"resolution must be >= 16, got {self.resolution}")
        need(self.synth_classes >= 2, f"synth_classes must be >= 2, got {self.synth_classes}")
        need(self.synth_per_class >= 1, f"synth_per_class must be >= 1, got {self.synth_per_class}")
        need(self.n_train_classes >= 1, f"n_train_classes must be >= 1, got {self.n_train_classes}")
        need(self.n_val_classes >= 0, f"n_val_classes must be >= 0, got {self.n_val_classes}")
        need(self.timesteps >= 1, f"timesteps must be >= 1, got {self.timesteps}")
        need(0.0 <= self.tau < 1.0, f"tau must lie in [0, 1), got {self.tau}")
        need(self.v_th > 0, f"v_th must be positive, got {self.v_th}")
        need(self.surrogate_width > 0, f"surrogate_width must be positive, got {self.surrogate_width}")
        need(self.backbone in ("vggsnn", "scnn"), f"backbone must be 'vggsnn' or 'scnn', got {self.backbone!r}")
        need(self.channel_divisor >= 1, f"channel_divisor must be >= 1, got {self.channel_divisor}")
        need(self.compact_channels >= 1, f"compact_channels must be >= 1, got {self.compact_channels}")
        need(self.hidden_channels >= 1, f"hidden_channels must be >= 1, got {self.hidden_channels}")
        need(self.gamma > 0, f"gamma must be positive, got {self.gamma}")
        need(0.0 <= self.lam <= 1.0, f"lambda must lie in [0, 1], got {self.lam}")
        need(self.tau_c > 0, f"tau_c must be positive, got {self.tau_c}")
        need(self.n_way >= 1, f"n_way must be >= 1, got {self.n_way}")
        need(self.k_shot >= 1, f"k_shot must be >= 1, got {self.k_shot}")
        need(self.q_query >= 1, f"q_query must be >= 1, got {self.q_query}")
        need(self.episodes >= 0, f"episodes must be >= 0, got {self.episodes}")
        need(self.lr > 0, f"lr must be positive, got {self.lr}")
        need(0.0 <= self.momentum < 1.0, f"momentum must lie in [0, 1), got {self.momentum}")
        need(self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}")
        need(self.eval_episodes >= 1, f"eval_episodes must be >= 1, got {self.eval_episodes}")
        need(0.0 <= self.noise_rate <= 1.0, f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        need(self.probe_episodes >= 1, f"probe_episodes must be >= 1, got {self.probe_episodes}")
        need(self.log_every >= 0, f"log_every must be >= 0, got {self.log_every}")
        if not self.data_root:
            need(
                self.n_train_classes + self.n_val_classes < self.synth_classes,
                f"{self.synth_classes} synthetic classes leave no test classes after "
                f"{self.n_train_classes} train + {self.n_val_classes} val",
            )
            n_test = self.synth_classes - self.n_train_classes - self.n_val_classes
            need(
                n_test >= self.n_way or n_test < 1,
                f"n_way={self.n_way} exceeds the {n_test} synthetic test classes",
            )
            need(
                self.synth_per_class >= self.k_shot + self.q_query,
                f"synth_per_class={self.synth_per_class} is below k_shot+q_query={self.k_shot + self.q_query}",
            )
        if self.n_train_classes >= 1 and self.n_way > self.n_train_classes:
            p.append(f"n_way={self.n_way} exceeds n_train_classes={self.n_train_classes}")
        return p

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    # -- serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {_FIELD_TO_KEY.get(k, k): v for k, v in dataclasses.asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs, problems = {}, []
        for key, value in raw.items():
            name = _KEY_TO_FIELD.get(key, key)
            if name not in known:
                problems.append(f"unknown config key {key!r}")
                continue
            try:
                kwargs[name] = _coerce(known[name].type, value, key)
            except ValueError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigValidationError(problems)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([f"config is not valid JSON: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigValidationError(["config must be a JSON object"])
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings; values are parsed by field type."""
        raw = self.to_dict()
        problems = []
        for pair in pairs:
            key, sep, value = pair.partition("=")
            key = key.strip()
            if not sep or not key:
                problems.append(f"override {pair!r} is not of the form key=value")
                continue
            raw[key] = value.strip()
        if problems:
            raise ConfigValidationError(problems)
        return RunConfig.from_dict(raw)

    # -- views for the library -----------------------------------------------------
    def lif(self) -> LifParams:
        return LifParams(self.tau, self.v_th, self.surrogate_width)

    def model_config(self, in_channels: int, num_classes_train: int) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                variant=self.backbone,
                timesteps=self.timesteps,
                in_channels=in_channels,
                channel_divisor=self.channel_divisor,
                input_size=self.resolution,
            ),
            lif=self.lif(),
            compact_channels=self.compact_channels,
            hidden_channels=self.hidden_channels,
            gamma=self.gamma,
            num_classes_train=num_classes_train,
            use_sfe=self.use_sfe,
            use_cfc=self.use_cfc,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            episodes=self.episodes,
            n_way=self.n_way,
            k_shot=self.k_shot,
            q_query=self.q_query,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lam=self.lam,
            tau_c=self.tau_c,
            seed=self.seed,
        )


def _coerce(type_name, value, key):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    if type_name == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if type_name == "int":
        if isinstance(value, bool):
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ValueError(f"{key}: expected an integer, got {value!r}") from None
    if type_name == "float":
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ValueError(f"{key}: expected a number, got {value!r}") from None
    return str(value)
