"""Domain orderings and training-data corruption for the ablations."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .signalgen import DomainDataset, with_samples


class Ordering(str, enum.Enum):
    LOWEST_FIRST = "LowestFirst"
    HIGHEST_FIRST = "HighestFirst"
    ALTERNATED = "Alternated"
    AS_GIVEN = "AsGiven"


@dataclass(frozen=True)
class CorruptionLevel:
    name: str
    data_fraction: float
    noise_rate: float


CORRUPTION_LEVELS = {
    "None": CorruptionLevel("None", 0.0, 0.0),
    "Mild": CorruptionLevel("Mild", 0.20, 0.05),
    "Moderate": CorruptionLevel("Moderate", 0.30, 0.15),
    "High": CorruptionLevel("High", 0.40, 0.30),
}


def corruption_level(name: str) -> CorruptionLevel:
    for key, level in CORRUPTION_LEVELS.items():
        if key.lower() == str(name).lower():
            return level
    raise ValueError(f"unknown corruption level {name!r}; choose from {sorted(CORRUPTION_LEVELS)}")


def order_domains(
    kind: Ordering | str,
    domain_ids: Sequence[int],
    baseline_acc: Mapping[int, float] | None = None,
) -> list[int]:
    """Permute ``domain_ids`` by baseline accuracy.

    Alternated takes highest, lowest, second highest, second lowest, ...
    Ties are broken by the lower domain id throughout.
    """
    kind = Ordering(kind)
    ids = list(domain_ids)
    if kind is Ordering.AS_GIVEN:
        return ids
    baseline_acc = baseline_acc or {}
    missing = [d for d in ids if d not in baseline_acc]
    if missing:
        raise ValueError(f"no baseline accuracy for domains {missing}")
    ascending = sorted(ids, key=lambda d: (baseline_acc[d], d))
    descending = sorted(ids, key=lambda d: (-baseline_acc[d], d))
    if kind is Ordering.LOWEST_FIRST:
        return ascending
    if kind is Ordering.HIGHEST_FIRST:
        return descending
    out: list[int] = []
    used: set[int] = set()
    hi = lo = 0
    while len(out) < len(ids):
        while descending[hi] in used:
            hi += 1
        out.append(descending[hi])
        used.add(descending[hi])
        if len(out) == len(ids):
            break
        while ascending[lo] in used:
            lo += 1
        out.append(ascending[lo])
        used.add(ascending[lo])
    return out


def corrupt_dataset(ds: DomainDataset, level: CorruptionLevel, rng: np.random.Generator) -> DomainDataset:
    """Add Gaussian noise to a random subset of the raw training windows.

    ``round(data_fraction * n_train)`` windows are picked uniformly; each
    gets noise with std ``noise_rate * RMS(window)``.  Labels and the test
    split are left alone.
    """
    if not 0.0 <= level.data_fraction <= 1.0 or level.noise_rate < 0.0:
        raise ValueError(f"invalid corruption level {level}")
    n = len(ds.train)
    count = int(np.floor(level.data_fraction * n + 0.5))
    if count == 0 or level.noise_rate == 0.0:
        return DomainDataset(spec=ds.spec, train=list(ds.train), test=list(ds.test))
    picks = set(rng.choice(n, size=count, replace=False).tolist())
    train = []
    for i, (window, label) in enumerate(ds.train):
        if i in picks:
            x = window.samples
            rms = float(np.sqrt(np.mean(x**2)))
            window = with_samples(window, x + rng.normal(0.0, level.noise_rate * rms, size=x.shape))
        train.append((window, label))
    return DomainDataset(spec=ds.spec, train=train, test=list(ds.test))
