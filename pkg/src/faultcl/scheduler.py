"""Boosting-style domain weighting, replay selection and the exemplar buffer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

REPLAY_FRACTION = 0.10


@dataclass(frozen=True)
class DomainWeights:
    episode_k: int
    w: dict[int, float]

    def get(self, domain: int) -> float:
        return self.w.get(domain, 0.0)


def compute_weights(mean_log_p: Mapping[int, float], k: int) -> DomainWeights:
    """Weight each domain by ``exp(-mean log p)``, normalised over the domains given.

    Harder domains (lower ensemble likelihood) get larger weights.  Domains
    absent from ``mean_log_p`` and every domain above ``k`` get weight 0.
    """
    if not mean_log_p:
        raise ValueError("no domains to weight")
    for d, v in mean_log_p.items():
        if not 1 <= d <= k:
            raise ValueError(f"domain {d} outside 1..{k}")
        if not math.isfinite(v):
            raise ValueError(f"mean log-probability of domain {d} is not finite")
        if v > 0:
            raise ValueError(f"mean log-probability of domain {d} is positive ({v})")
    keys = sorted(mean_log_p)
    risk = np.array([-mean_log_p[d] for d in keys])
    # exp(r - max r) normalises to the same vector as exp(r)
    e = np.exp(risk - risk.max())
    w = e / e.sum()
    weights = {d: 0.0 for d in range(1, k + 1)}
    weights.update({d: float(x) for d, x in zip(keys, w)})
    return DomainWeights(episode_k=k, w=weights)


def uniform_weights(domains: list[int] | range, k: int) -> DomainWeights:
    return compute_weights({d: 0.0 for d in domains}, k)


def select_domains(weights: DomainWeights, b: int, current_k: int, rng: np.random.Generator) -> set[int]:
    """Current domain plus ``b - 1`` distinct past domains drawn by weight.

    Draws are weighted and without replacement: a duplicate is rejected and
    redrawn, which is the same as drawing from the renormalised remainder.
    Zero-weight domains are never drawn, so fewer than ``b - 1`` past
    domains come back when fewer have positive weight.
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    if b > current_k:
        raise ValueError(f"b={b} exceeds the episode index {current_k}")
    chosen = {current_k}
    past = [d for d in range(1, current_k) if weights.get(d) > 0.0]
    p = np.array([weights.get(d) for d in past])
    while len(chosen) < b and past:
        i = int(rng.choice(len(past), p=p / p.sum()))
        chosen.add(past.pop(i))
        p = np.delete(p, i)
    return chosen


@dataclass
class ReplayBuffer:
    """Per-domain store of a fixed fraction of each domain's training split."""

    capacity_domains: int | None = None
    fraction: float = REPLAY_FRACTION
    store: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    last_loss: dict[int, float] = field(default_factory=dict)
    evicted: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity_domains is not None and self.capacity_domains < 1:
            raise ValueError("capacity_domains must be >= 1 or None")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")

    def __contains__(self, domain: int) -> bool:
        return domain in self.store

    def __len__(self) -> int:
        return len(self.store)

    def domains(self) -> list[int]:
        return sorted(self.store)

    def exemplars(self, domain: int) -> tuple[np.ndarray, np.ndarray]:
        return self.store[domain]

    def exemplar_count(self, n_train: int) -> int:
        return max(1, int(math.floor(self.fraction * n_train + 0.5)))


def admit_domain(
    buffer: ReplayBuffer,
    domain: int,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> list[int]:
    """Store a uniform sample of ``fraction`` of a domain's training split.

    When the buffer exceeds its capacity the stored domain with the lowest
    ``last_loss`` (lowest risk, ties to the lower id) is evicted; the new
    domain itself is never the victim.  Returns the evicted domain ids.
    """
    if domain in buffer.store or domain in buffer.evicted:
        raise ValueError(f"domain {domain} already admitted")
    n = len(labels)
    if n == 0:
        raise ValueError("cannot admit an empty training split")
    count = min(n, buffer.exemplar_count(n))
    idx = np.sort(rng.choice(n, size=count, replace=False))
    buffer.store[domain] = (np.asarray(images)[idx].copy(), np.asarray(labels)[idx].copy())

    evicted = []
    while buffer.capacity_domains is not None and len(buffer.store) > buffer.capacity_domains:
        candidates = [d for d in buffer.store if d != domain]
        victim = min(candidates, key=lambda d: (buffer.last_loss.get(d, 0.0), d))
        del buffer.store[victim]
        buffer.last_loss.pop(victim, None)
        buffer.evicted.append(victim)
        evicted.append(victim)
    return evicted


def balanced_pick(buffer: ReplayBuffer | Mapping[int, float], n_pick: int) -> set[int]:
    """Alternate highest-loss and lowest-loss stored domains until ``n_pick`` are chosen.

    The first pick is the highest-loss domain.  Ties go to the lower id.
    Accepts a buffer or a plain ``domain -> loss`` mapping.
    """
    losses = dict(buffer.last_loss) if isinstance(buffer, ReplayBuffer) else dict(buffer)
    if isinstance(buffer, ReplayBuffer):
        losses = {d: losses.get(d, 0.0) for d in buffer.store}
    if not losses:
        raise ValueError("buffer is empty")
    by_high = sorted(losses, key=lambda d: (-losses[d], d))
    by_low = sorted(losses, key=lambda d: (losses[d], d))
    chosen: list[int] = []
    hi = lo = 0
    take_high = True
    while len(chosen) < min(n_pick, len(losses)):
        if take_high:
            while by_high[hi] in chosen:
                hi += 1
            chosen.append(by_high[hi])
        else:
            while by_low[lo] in chosen:
                lo += 1
            chosen.append(by_low[lo])
        take_high = not take_high
    return set(chosen)
