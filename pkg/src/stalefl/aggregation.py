"""Server update rules: biased averaging, unbiased reweighting, and the
fresh/stale convex combination, plus the server-side memory of stale updates.

All rules are pure functions of their inputs and sum client contributions in
ascending client-index order for bitwise reproducibility.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .local_solver import ClientUpdate
from .objectives import Objective


class NoParticipantsError(RuntimeError):
    """Plain averaging is undefined on an empty participant set."""


@dataclass(frozen=True)
class AggregatorConfig:
    rule: str = "fedstale"            # fedavg_biased | u_fedavg | u_fedvarp | fedstale
    beta: float = 0.5                 # staleness weight, used by fedstale only
    weights_source: str = "exact"     # exact | estimator
    weight_cap: float | None = None   # estimator weight cap; engine default if None

    _RULES = ("fedavg_biased", "u_fedavg", "u_fedvarp", "fedstale")

    def __post_init__(self):
        if self.rule not in self._RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {self._RULES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.weights_source not in ("exact", "estimator"):
            raise ValueError("weights_source must be 'exact' or 'estimator'")


@dataclass(frozen=True)
class GlobalUpdate:
    delta: np.ndarray
    fresh_norm: float = 0.0
    stale_norm: float = 0.0


@dataclass
class MemoryBank:
    """Most recent update per client, zero-initialized."""

    n_clients: int
    dim: int
    slots: np.ndarray = field(init=False)
    last_refresh_round: np.ndarray = field(init=False)

    def __post_init__(self):
        self.slots = np.zeros((self.n_clients, self.dim))
        self.last_refresh_round = np.zeros(self.n_clients, dtype=np.int64)


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    out = sorted(updates, key=lambda u: u.client)
    for a, b in zip(out, out[1:]):
        if a.client == b.client:
            raise ValueError(f"duplicate client {a.client} in round updates")
    return out


def fedavg_biased(updates: list[ClientUpdate]) -> GlobalUpdate:
    """Plain average over participants; biased under heterogeneous p_i."""
    updates = _sorted_updates(updates)
    if not updates:
        raise NoParticipantsError("no participants this round")
    delta = np.zeros_like(updates[0].delta)
    for u in updates:
        delta += u.delta
    delta /= len(updates)
    return GlobalUpdate(delta, fresh_norm=float(np.linalg.norm(delta)))


def u_fedavg(
    updates: list[ClientUpdate],
    weights: np.ndarray,
    n_clients: int,
    dim: int | None = None,
) -> GlobalUpdate:
    """Participant updates reweighted by 1/p_i (or estimated weight), over N.

    An empty participant set yields the empty-sum value (zero update); `dim`
    is only needed in that case.
    """
    updates = _sorted_updates(updates)
    if not updates:
        if dim is None:
            raise ValueError("dim is required for an empty participant set")
        return GlobalUpdate(np.zeros(dim))
    delta = np.zeros_like(updates[0].delta)
    for u in updates:
        delta += weights[u.client] * u.delta
    delta /= n_clients
    return GlobalUpdate(delta, fresh_norm=float(np.linalg.norm(delta)))


def fedstale(
    updates: list[ClientUpdate],
    bank: MemoryBank,
    weights: np.ndarray,
    n_clients: int,
    beta: float,
) -> GlobalUpdate:
    """Convex fresh/stale combination:
    (beta/N) sum_i h_i + (1/N) sum_{i in S} (delta_i - beta*h_i)/p_i.

    Does not mutate the bank. beta=0 recovers the unbiased average of fresh
    updates; beta=1 recovers the stale-proxy rule.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    updates = _sorted_updates(updates)
    stale = beta * bank.slots.sum(axis=0) / n_clients
    fresh = np.zeros(bank.dim)
    for u in updates:
        fresh += weights[u.client] * (u.delta - beta * bank.slots[u.client])
    fresh /= n_clients
    return GlobalUpdate(
        stale + fresh,
        fresh_norm=float(np.linalg.norm(fresh)),
        stale_norm=float(np.linalg.norm(stale)),
    )


def u_fedvarp(
    updates: list[ClientUpdate],
    bank: MemoryBank,
    weights: np.ndarray,
    n_clients: int,
) -> GlobalUpdate:
    """Stale updates as proxies for absent clients:
    (1/N) sum_i h_i + (1/N) sum_{i in S} (delta_i - h_i)/p_i.

    Implemented directly (not via fedstale) so the two serve as independent
    cross-checks of the same algebra.
    """
    updates = _sorted_updates(updates)
    delta = bank.slots.sum(axis=0) / n_clients
    stale_norm = float(np.linalg.norm(delta))
    fresh = np.zeros(bank.dim)
    for u in updates:
        fresh += weights[u.client] * (u.delta - bank.slots[u.client])
    fresh /= n_clients
    return GlobalUpdate(delta + fresh, fresh_norm=float(np.linalg.norm(fresh)), stale_norm=stale_norm)


def refresh_memory(bank: MemoryBank, updates: list[ClientUpdate], rnd: int) -> MemoryBank:
    """Overwrite participants' slots with their fresh updates; in place."""
    for u in _sorted_updates(updates):
        bank.slots[u.client] = u.delta
        bank.last_refresh_round[u.client] = rnd
    return bank


def memory_error(bank: MemoryBank, obj: Objective, w: np.ndarray) -> float:
    """Mean squared deviation of memory slots from current local gradients."""
    total = 0.0
    for i in range(bank.n_clients):
        total += float(np.sum((obj.gradient(w, i) - bank.slots[i]) ** 2))
    return total / bank.n_clients


def export_bank_csv(bank: MemoryBank, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["client_id", "last_refresh_round"] + [f"h_{j}" for j in range(bank.dim)])
        for i in range(bank.n_clients):
            wr.writerow(
                [i, int(bank.last_refresh_round[i])]
                + [f"{v:.17g}" for v in bank.slots[i]]
            )


def load_bank_csv(path: str | Path) -> MemoryBank:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    dim = len(header) - 2
    bank = MemoryBank(len(body), dim)
    for row in body:
        i = int(row[0])
        bank.last_refresh_round[i] = int(row[1])
        bank.slots[i] = [float(v) for v in row[2:]]
    return bank
