"""Server-side aggregation strategies over client updates.

All functions are pure. Weighted sums accumulate in ascending ``client_id``
order so results do not depend on the order updates arrive in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .params import ParameterSet, check_schema


class StrategyKind(str, enum.Enum):
    FEDAVG = "FedAvg"
    FEDPROX = "FedProx"
    FEDTRIMMEDAVG = "FedTrimmedAvg"
    KRUM = "Krum"
    FEDAVGM = "FedAvgM"

    @classmethod
    def parse(cls, value: "str | StrategyKind") -> "StrategyKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown strategy {value!r}; expected one of {[k.value for k in cls]}")


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    params: ParameterSet
    num_examples: int
    train_loss: float

    def __post_init__(self) -> None:
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")


@dataclass
class StrategyConfig:
    kind: StrategyKind = StrategyKind.FEDAVG
    trim_fraction: float = 0.2
    krum_f: int = 0
    server_momentum: float = 0.9
    server_lr: float = 1.0
    prox_mu: float = 0.01

    def __post_init__(self) -> None:
        self.kind = StrategyKind.parse(self.kind)
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")
        if self.krum_f < 0:
            raise ValueError("krum_f must be >= 0")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ValueError("server_momentum must lie in [0, 1)")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be positive")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "trim_fraction": self.trim_fraction,
            "krum_f": self.krum_f,
            "server_momentum": self.server_momentum,
            "server_lr": self.server_lr,
            "prox_mu": self.prox_mu,
        }


@dataclass(frozen=True)
class ServerState:
    global_params: ParameterSet
    momentum_buffer: ParameterSet | None = None
    round: int = 0


def _validated(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in updates: {ids}")
    for u in ordered[1:]:
        check_schema(ordered[0].params, u.params)
    return ordered


def fed_avg(updates: Sequence[ClientUpdate]) -> ParameterSet:
    """Example-count weighted mean of client parameters."""
    ordered = _validated(updates)
    total = sum(u.num_examples for u in ordered)
    out = {}
    for name in ordered[0].params:
        acc = ordered[0].params[name] * (ordered[0].num_examples / total)
        for u in ordered[1:]:
            acc = acc + u.params[name] * (u.num_examples / total)
        out[name] = acc
    return ParameterSet._from_owned(out)


def fed_prox_aggregate(updates: Sequence[ClientUpdate]) -> ParameterSet:
    # the proximal term lives in the client objective; the server side is FedAvg
    return fed_avg(updates)


def trim_count(n: int, trim_fraction: float) -> int:
    k = int(np.floor(trim_fraction * n))
    if n - 2 * k < 1:
        raise AggregationError(f"trim_fraction={trim_fraction} leaves no values for n={n}")
    return k


def fed_trimmed_avg(updates: Sequence[ClientUpdate], trim_fraction: float) -> ParameterSet:
    """Coordinatewise mean after dropping the ``floor(trim_fraction * n)`` extremes per side."""
    ordered = _validated(updates)
    n = len(ordered)
    k = trim_count(n, trim_fraction)
    out = {}
    for name in ordered[0].params:
        stacked = np.sort(np.stack([u.params[name] for u in ordered]), axis=0)
        kept = stacked[k:n - k]
        acc = kept[0].copy()
        for row in kept[1:]:
            acc += row
        out[name] = acc / (n - 2 * k)
    return ParameterSet._from_owned(out)


def krum_scores(updates: Sequence[ClientUpdate], krum_f: int) -> list[float]:
    n = len(updates)
    if n < krum_f + 3:
        raise AggregationError(f"Krum needs n >= f + 3 (n={n}, f={krum_f})")
    neighbours = n - krum_f - 2
    flat = [u.params.flatten() for u in updates]
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            diff = flat[i] - flat[j]
            dist[i, j] = dist[j, i] = float(np.dot(diff, diff))
    scores = []
    for i in range(n):
        others = sorted(dist[i, j] for j in range(n) if j != i)
        scores.append(float(sum(others[:neighbours])))
    return scores


def krum_select(updates: Sequence[ClientUpdate], krum_f: int) -> tuple[int, list[float]]:
    """Position of the update with the lowest Krum score, and all scores.

    Equal scores resolve to the update with the lowest ``client_id``.
    """
    _validated(updates)
    scores = krum_scores(updates, krum_f)
    best = min(range(len(updates)), key=lambda i: (scores[i], updates[i].client_id))
    return best, scores


def fed_avg_m_step(state: ServerState, updates: Sequence[ClientUpdate],
                   server_momentum: float, server_lr: float) -> ServerState:
    """Server momentum on the pseudo-gradient ``global - fed_avg(updates)``.

    The new global is evaluated as ``avg - (lr - 1) * delta - lr * momentum * buffer``,
    which equals ``global - lr * buffer'`` and reproduces FedAvg bit for bit when
    momentum is 0 and lr is 1.
    """
    avg = fed_avg(updates)
    check_schema(state.global_params, avg)
    buffer = state.momentum_buffer
    if buffer is None:
        buffer = state.global_params.zeros_like()
    check_schema(state.global_params, buffer)
    new_buf, new_glob = {}, {}
    for name, g in state.global_params.items():
        delta = g - avg[name]
        new_buf[name] = server_momentum * buffer[name] + delta
        new_glob[name] = avg[name] - (server_lr - 1.0) * delta - server_lr * server_momentum * buffer[name]
    return ServerState(
        global_params=ParameterSet._from_owned(new_glob),
        momentum_buffer=ParameterSet._from_owned(new_buf),
        round=state.round + 1,
    )


def aggregate(kind: StrategyKind | str, state: ServerState, updates: Sequence[ClientUpdate],
              strategy_config: StrategyConfig) -> ServerState:
    """Apply one strategy and return the next server state."""
    kind = StrategyKind.parse(kind)
    if not updates:
        raise AggregationError("no client updates to aggregate")
    for u in updates:
        check_schema(state.global_params, u.params)
    if kind is StrategyKind.FEDAVGM:
        return fed_avg_m_step(state, updates, strategy_config.server_momentum,
                              strategy_config.server_lr)
    if kind is StrategyKind.FEDAVG:
        new = fed_avg(updates)
    elif kind is StrategyKind.FEDPROX:
        new = fed_prox_aggregate(updates)
    elif kind is StrategyKind.FEDTRIMMEDAVG:
        new = fed_trimmed_avg(updates, strategy_config.trim_fraction)
    else:
        idx, _ = krum_select(updates, strategy_config.krum_f)
        new = updates[idx].params
    return replace(state, global_params=new, round=state.round + 1)
