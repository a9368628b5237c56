from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from ..errors import ConfigError

STRATEGIES = ("wce", "dann", "fairdisco", "fades", "groupdro", "moe")
DOMAIN_AWARE = frozenset({"dann", "fairdisco", "fades", "groupdro", "moe"})
BATCH_GRID = (8, 16, 32)
LR_GRID = (1e-3, 1e-4, 1e-5)


@dataclass(frozen=True)
class StrategyConfig:
    """Every knob of a training run.

    ``None`` fields resolve to per-strategy defaults: 50 epochs (30 for FADES),
    batch 32 and lr 1e-3 (FADES is pinned to batch 32, lr 1e-4), z_dim 16
    (12 for FADES, which needs three equal blocks). A 16-dim z keeps a linear
    adversary from memorising 32-sample batches.

    Adversarial strategies (DANN, FairDisCO, FADES) give their adversary
    heads ``adversary_steps`` extra head-only Adam steps per batch at
    ``adversary_learning_rate`` before the joint step, so the adversary stays
    close to a best response. ``adversary_steps=0`` is plain simultaneous
    gradient reversal.
    """

    strategy: str = "wce"
    task: str = "diagnosis"
    batch_size: int | None = None
    learning_rate: float | None = None
    epochs: int | None = None
    lambda_grl: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    eta_q: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    hidden_dim: int = 64
    z_dim: int | None = None
    conf_target: str = "domain_head"
    moe_warmup_fraction: float = 0.2
    tc_weight: float = 1.0
    cmi_weight: float = 1.0
    reg_weight: float = 1.0
    adversary_steps: int = 20
    adversary_learning_rate: float = 1e-2
    off_grid: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.task not in ("diagnosis", "density"):
            raise ConfigError(f"unknown task {self.task!r}")
        fades = self.strategy == "fades"
        defaults = {
            "batch_size": 32,
            "learning_rate": 1e-4 if fades else 1e-3,
            "epochs": 30 if fades else 50,
            "z_dim": 12 if fades else 16,
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        if not self.off_grid:
            if self.batch_size not in BATCH_GRID:
                raise ConfigError(f"batch_size {self.batch_size} outside grid {BATCH_GRID}; "
                                  "set off_grid to override")
            if not any(abs(self.learning_rate - lr) <= 1e-12 for lr in LR_GRID):
                raise ConfigError(f"learning_rate {self.learning_rate} outside grid {LR_GRID}; "
                                  "set off_grid to override")
        if self.batch_size < 2 or self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size >= 2, epochs >= 1 and learning_rate > 0 required")
        for name in ("lambda_grl", "alpha", "beta", "tc_weight", "cmi_weight", "reg_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.adversary_steps < 0 or self.adversary_learning_rate <= 0:
            raise ConfigError("adversary_steps >= 0 and adversary_learning_rate > 0 required")
        if self.eta_q < 0:
            raise ConfigError("eta_q must be >= 0")
        if self.conf_target not in ("domain_head", "task_head"):
            raise ConfigError("conf_target must be 'domain_head' or 'task_head'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if not 0.0 <= self.moe_warmup_fraction <= 1.0:
            raise ConfigError("moe_warmup_fraction must lie in [0, 1]")
        if fades and self.z_dim % 3:
            raise ConfigError("FADES needs z_dim divisible by 3")
        if self.hidden_dim < self.z_dim or self.z_dim < 2:
            raise ConfigError("need hidden_dim >= z_dim >= 2")

    def replace(self, **changes: Any) -> "StrategyConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StrategyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path) -> "StrategyConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)
