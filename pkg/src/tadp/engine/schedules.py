"""Named training schedules, the two-group optimizer and the LR policy."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import torch
from torch import nn


class ScheduleError(ValueError):
    pass


class ParameterOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    name: str
    lr: float
    batch_size: int
    weight_decay: float
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_iters: int = 0
    warmup_ratio: float = 1e-6
    backbone_lr_scale: float = 0.01
    max_steps: int | None = None
    epochs: int | None = None
    grad_accumulation: int = 1
    lr_policy: str = "poly"  # poly | constant
    poly_power: float = 1.0
    layer_decay: float | None = None
    drop_path: float | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.grad_accumulation < 1:
            raise ScheduleError(f"{self.name}: lr, batch_size and grad_accumulation must be positive")
        if (self.max_steps is None) == (self.epochs is None):
            raise ScheduleError(f"{self.name}: set exactly one of max_steps and epochs")
        if self.lr_policy not in ("poly", "constant"):
            raise ScheduleError(f"{self.name}: unknown lr_policy {self.lr_policy!r}")
        if self.backbone_lr_scale < 0:
            raise ScheduleError(f"{self.name}: backbone_lr_scale must be >= 0")

    def total_steps(self, dataset_size: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        per_epoch = math.ceil(dataset_size / (self.batch_size * self.grad_accumulation))
        return self.epochs * per_epoch

    def with_overrides(self, **overrides) -> "Schedule":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ScheduleError(f"unknown schedule fields: {sorted(unknown)}")
        if "max_steps" in overrides and overrides["max_steps"] is not None and "epochs" not in overrides:
            overrides["epochs"] = None
        if "epochs" in overrides and overrides["epochs"] is not None and "max_steps" not in overrides:
            overrides["max_steps"] = None
        if "betas" in overrides:
            overrides["betas"] = tuple(overrides["betas"])
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# Backbone LR scale 1/10 is the prose variant of the 0.01 table value.
PROSE_BACKBONE_LR_SCALE = 0.1

_ADE = dict(batch_size=2, weight_decay=0.005, warmup_ratio=1e-6, backbone_lr_scale=0.01)
_NYU = dict(lr=5e-4, batch_size=3, weight_decay=0.1, layer_decay=0.9, drop_path=0.1, lr_policy="constant")

SCHEDULES: dict[str, Schedule] = {
    s.name: s
    for s in [
        Schedule("ade_full_80k", lr=8e-5, warmup_iters=1500, max_steps=80_000, **_ADE),
        Schedule("ade_fast_8k", lr=1.6e-4, warmup_iters=150, max_steps=8_000, **_ADE),
        Schedule("ade_fast_4k", lr=1.6e-4, warmup_iters=75, max_steps=4_000, **_ADE),
        Schedule("nyu_25ep", epochs=25, **_NYU),
        Schedule("nyu_1ep", epochs=1, **_NYU),
        Schedule("pascal_15ep", lr=1e-5, batch_size=2, weight_decay=0.01, grad_accumulation=4, epochs=15,
                 lr_policy="constant"),
        Schedule("cityscapes_40k", lr=8e-5, warmup_iters=1500, max_steps=40_000, **_ADE),
        Schedule("voc_cross_100ep", lr=1e-5, batch_size=2, weight_decay=0.01, epochs=100, lr_policy="constant"),
    ]
}


def get_schedule(name: str, **overrides) -> Schedule:
    try:
        base = SCHEDULES[name]
    except KeyError:
        raise ScheduleError(f"unknown schedule {name!r}; known: {sorted(SCHEDULES)}") from None
    return base.with_overrides(**overrides) if overrides else base


def _trainable(module: nn.Module | None) -> list[nn.Parameter]:
    if module is None:
        return []
    return [p for p in module.parameters() if p.requires_grad]


def build_optimizer(backbone: nn.Module | None, head: nn.Module, schedule: Schedule) -> torch.optim.AdamW:
    """AdamW with the head at ``lr`` and the backbone at ``lr * backbone_lr_scale``."""
    head_params = _trainable(head)
    backbone_params = _trainable(backbone)
    shared = {id(p) for p in head_params} & {id(p) for p in backbone_params}
    if shared:
        raise ParameterOverlapError(f"{len(shared)} parameters belong to both head and backbone")
    groups = [{"params": head_params, "lr": schedule.lr, "name": "head"}]
    if backbone_params:
        groups.append({"params": backbone_params, "lr": schedule.lr * schedule.backbone_lr_scale, "name": "backbone"})
    return torch.optim.AdamW(groups, lr=schedule.lr, betas=schedule.betas, weight_decay=schedule.weight_decay)


def lr_factor(step: int, schedule: Schedule, total_steps: int) -> float:
    """Multiplier on each group's base lr: linear warmup from warmup_ratio, then poly decay."""
    if schedule.warmup_iters and step < schedule.warmup_iters:
        k = step / schedule.warmup_iters
        return schedule.warmup_ratio + (1 - schedule.warmup_ratio) * k
    if schedule.lr_policy == "constant":
        return 1.0
    return max(1.0 - step / max(total_steps, 1), 0.0) ** schedule.poly_power


def build_lr_scheduler(optimizer, schedule: Schedule, total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: lr_factor(step, schedule, total_steps))
