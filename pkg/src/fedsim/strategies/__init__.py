"""Strategy registry."""

from __future__ import annotations

from ..errors import ConfigError
from .base import FedAvgLike, Strategy, evaluate_params, evaluate_predictions
from .cluster import CFL, HypCluster
from .fairness import AFL, GIFAIR, QFFL
from .global_models import (
    DANE,
    SCAFFOLD,
    FedAc,
    FedAdam,
    FedAvg,
    FedAvgM,
    FedDyn,
    FedEnsemble,
    FedOpt,
    FedPD,
    FedProx,
    FedSGD,
    FedSplit,
    FedYogi,
    LoAdaBoost,
)
from .personal import APFL, L2GD, Ditto, FedPer, LGFedAvg, LocalOnly, MetaSGD, PerFedAvg, PFedMe, TrainThenPersonalize

_CLASSES = [
    FedAvg, FedSGD, FedProx, DANE, SCAFFOLD, FedDyn, FedPD, FedSplit, FedOpt, FedAdam, FedYogi, FedAvgM,
    FedAc, LoAdaBoost, FedEnsemble,
    LocalOnly, TrainThenPersonalize, Ditto, PFedMe, L2GD, FedPer, LGFedAvg, APFL, PerFedAvg, MetaSGD,
    QFFL, GIFAIR, AFL,
    HypCluster, CFL,
]

REGISTRY: dict[str, type[Strategy]] = {cls.name: cls for cls in _CLASSES}


def register(cls: type[Strategy]) -> type[Strategy]:
    """Class decorator adding a strategy to the registry under ``cls.name``."""
    if not (isinstance(cls, type) and issubclass(cls, Strategy)):
        raise TypeError("register expects a Strategy subclass")
    if cls.name in REGISTRY and REGISTRY[cls.name] is not cls:
        raise ConfigError(f"strategy name {cls.name!r} is already registered")
    REGISTRY[cls.name] = cls
    return cls


def strategy_names() -> list[str]:
    return sorted(REGISTRY)


def build_strategy(name: str, params: dict | None = None) -> Strategy:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown strategy {name!r}; registered: {', '.join(strategy_names())}") from None
    return cls(**(params or {}))


__all__ = [
    "REGISTRY", "Strategy", "FedAvgLike", "build_strategy", "register", "strategy_names", "evaluate_params",
    "evaluate_predictions",
] + [cls.__name__ for cls in _CLASSES]
