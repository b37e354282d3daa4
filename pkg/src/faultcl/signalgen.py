"""Synthetic multi-domain bearing vibration windows.

The 18 domains mirror the layout of the multi-domain rolling bearing
benchmark: three bearing families, two speed bands and three groups of
environmental conditions per family.  Signals are built from a deterministic
rotational skeleton plus a seeded fault impulse train and Gaussian noise, so
every window is a pure function of its arguments.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Bearing(str, enum.Enum):
    DEEP_GROOVE_6204 = "DeepGroove6204"
    TAPERED_30204 = "Tapered30204"
    CYLINDRICAL_N204 = "CylindricalN204"
    CYLINDRICAL_NJ204 = "CylindricalNJ204"


class Fault(str, enum.Enum):
    BALL = "Ball"
    INNER_RACE = "InnerRace"
    OUTER_RACE = "OuterRace"
    HEALTHY = "Healthy"


class Environment(str, enum.Enum):
    H = "H"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    U1 = "U1"
    U2 = "U2"
    U3 = "U3"
    L = "L"


class SpeedBand(str, enum.Enum):
    SLOW = "Slow"
    FAST = "Fast"

    @property
    def rpms(self) -> tuple[int, int, int]:
        return (600, 800, 1000) if self is SpeedBand.SLOW else (1200, 1400, 1600)


WINDOW_LEN = 512
BASE_NOISE = 0.05

# Characteristic fault frequencies as orders of the shaft frequency.
FAULT_ORDERS = {
    Fault.OUTER_RACE: 3.05,
    Fault.INNER_RACE: 4.95,
    Fault.BALL: 1.98,
}

MISALIGNMENT_2X = {Environment.M1: 0.2, Environment.M2: 0.4, Environment.M3: 0.6}
UNBALANCE_1X = {Environment.U1: 1.3, Environment.U2: 1.6, Environment.U3: 2.0}

# Structural resonance excited by each defect impact, Hz.
RESONANCE_HZ = {
    Bearing.DEEP_GROOVE_6204: 2200.0,
    Bearing.TAPERED_30204: 1800.0,
    Bearing.CYLINDRICAL_N204: 2600.0,
    Bearing.CYLINDRICAL_NJ204: 2400.0,
}

# Per-fault impact transmission: (peak amplitude, ring-down time constant s,
# resonance multiplier).  Outer-race impacts pass straight into the housing;
# inner-race and ball impacts cross extra interfaces and ring down faster.
IMPACT_PROFILE = {
    Fault.OUTER_RACE: (5.0, 3.0e-3, 1.0),
    Fault.INNER_RACE: (4.0, 1.5e-3, 1.4),
    Fault.BALL: (4.4, 2.5e-3, 0.6),
}
IMPULSE_JITTER = 0.02  # std of per-impact timing slip, fraction of the fault period

FOUR_FAULTS = (Fault.BALL, Fault.INNER_RACE, Fault.OUTER_RACE, Fault.HEALTHY)
THREE_FAULTS = (Fault.OUTER_RACE, Fault.HEALTHY, Fault.INNER_RACE)

_ENV_ROWS = (
    (Environment.H, Environment.M1, Environment.U1, Environment.L),
    (Environment.H, Environment.U1, Environment.U2, Environment.U3),
    (Environment.H, Environment.M1, Environment.M2, Environment.M3),
)
_FAMILY_BEARINGS = (
    (Bearing.DEEP_GROOVE_6204,) * 3,
    (Bearing.TAPERED_30204,) * 3,
    (Bearing.CYLINDRICAL_N204, Bearing.CYLINDRICAL_NJ204, Bearing.CYLINDRICAL_N204),
)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    bearing: Bearing
    fault_classes: tuple[Fault, ...]
    environment: tuple[Environment, ...]
    speed_band: SpeedBand
    sample_rate: int
    base_noise: float = BASE_NOISE

    @property
    def n_classes(self) -> int:
        return len(self.fault_classes)


@dataclass(frozen=True)
class SignalWindow:
    samples: np.ndarray
    label: Fault
    domain_id: int
    shaft_rpm: int
    seed: int
    environment: Environment = Environment.H


@dataclass
class DomainDataset:
    spec: DomainSpec
    train: list[tuple[SignalWindow, int]] = field(default_factory=list)
    test: list[tuple[SignalWindow, int]] = field(default_factory=list)


def make_domain_spec(domain_id: int) -> DomainSpec:
    """Return the bearing, speed band and environments of ``domain_id`` (1..18).

    Odd ids run in the slow band, even ids in the fast band.  Fast domains
    are sampled at 16 kHz so that both bands see roughly the same number of
    samples per shaft revolution.
    """
    if isinstance(domain_id, bool) or not isinstance(domain_id, (int, np.integer)):
        raise ValueError(f"domain_id must be an integer, got {domain_id!r}")
    if not 1 <= domain_id <= 18:
        raise ValueError(f"domain_id must be in 1..18, got {domain_id}")
    row = (domain_id - 1) // 2
    family, env_row = divmod(row, 3)
    fast = domain_id % 2 == 0
    return DomainSpec(
        domain_id=int(domain_id),
        bearing=_FAMILY_BEARINGS[family][env_row],
        fault_classes=THREE_FAULTS if family == 2 else FOUR_FAULTS,
        environment=_ENV_ROWS[env_row],
        speed_band=SpeedBand.FAST if fast else SpeedBand.SLOW,
        sample_rate=16000 if fast else 8000,
    )


def _skeleton(spec: DomainSpec, env: Environment, rpm: float, t: np.ndarray) -> np.ndarray:
    """Deterministic rotational content: shaft harmonics plus environment effects."""
    phase = 2.0 * np.pi * (rpm / 60.0) * t
    x = UNBALANCE_1X.get(env, 1.0) * np.sin(phase)
    x += (0.1 + MISALIGNMENT_2X.get(env, 0.0)) * np.sin(2.0 * phase + 0.5)
    x += 0.05 * np.sin(3.0 * phase + 1.0)
    if env is Environment.L:
        # half-order rattle with its odd sub-harmonic series
        x += 0.3 * np.sin(0.5 * phase) + 0.15 * np.sin(1.5 * phase + 0.3)
        x += 0.1 * np.sin(2.5 * phase + 0.7)
    return x


def _impulse_train(
    spec: DomainSpec, label: Fault, rpm: float, t: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    shaft_hz = rpm / 60.0
    fault_hz = FAULT_ORDERS[label] * shaft_hz
    period = 1.0 / fault_hz
    duration = t[-1] + t[1]
    t0 = rng.uniform(0.0, period)
    n_hits = int(np.ceil((duration - t0) / period)) + 1
    hits = t0 + period * np.arange(n_hits)
    hits += rng.normal(0.0, IMPULSE_JITTER * period, size=n_hits)
    gains = rng.uniform(0.8, 1.2, size=n_hits)
    if label is Fault.INNER_RACE:
        # load-zone modulation at shaft rate
        gains *= 1.0 + 0.5 * np.cos(2.0 * np.pi * shaft_hz * hits)
    elif label is Fault.BALL:
        # ball spin passes the load zone at cage rate
        gains *= 1.0 + 0.3 * np.cos(2.0 * np.pi * 0.4 * shaft_hz * hits)

    amplitude, decay, res_scale = IMPACT_PROFILE[label]
    f_res = RESONANCE_HZ[spec.bearing] * res_scale
    x = np.zeros_like(t)
    for hit, gain in zip(hits, gains):
        dt = t - hit
        on = dt >= 0.0
        if not on.any():
            continue
        d = dt[on]
        x[on] += gain * amplitude * np.exp(-d / decay) * np.sin(2.0 * np.pi * f_res * d)
    return x


def synthesize_window(
    spec: DomainSpec,
    label: Fault,
    shaft_rpm: int,
    seed: int,
    environment: Environment | None = None,
    n_samples: int = WINDOW_LEN,
) -> SignalWindow:
    """Generate one vibration window.

    ``environment`` defaults to a seed-determined member of the domain's
    environment set.  Output is bit-identical for identical arguments.
    """
    label = Fault(label)
    if label not in spec.fault_classes:
        raise ValueError(f"{label.value} is not a fault class of domain {spec.domain_id}")
    if shaft_rpm not in spec.speed_band.rpms:
        raise ValueError(f"{shaft_rpm} RPM outside the {spec.speed_band.value} band")
    if n_samples < 16:
        raise ValueError("n_samples must be at least 16")
    rng = np.random.default_rng(seed)
    if environment is None:
        environment = spec.environment[int(rng.integers(len(spec.environment)))]
    else:
        environment = Environment(environment)

    t = np.arange(n_samples) / float(spec.sample_rate)
    clean = _skeleton(spec, environment, float(shaft_rpm), t)
    if label is not Fault.HEALTHY:
        clean = clean + _impulse_train(spec, label, float(shaft_rpm), t, rng)
    rms = float(np.sqrt(np.mean(clean**2)))
    noisy = clean + rng.normal(0.0, spec.base_noise * rms, size=n_samples)
    return SignalWindow(
        samples=noisy,
        label=label,
        domain_id=spec.domain_id,
        shaft_rpm=int(shaft_rpm),
        seed=int(seed),
        environment=environment,
    )


def window_seed(base_seed: int, domain_id: int, split: int, class_idx: int, j: int) -> int:
    """Pack the provenance of a window into a unique 64-bit seed.

    Train (split 0) and test (split 1) occupy disjoint ranges.
    """
    if not 0 <= base_seed < 2**31:
        raise ValueError("base_seed must be in [0, 2**31)")
    if not 0 <= j < 2**20:
        raise ValueError("too many windows per class")
    return (base_seed << 32) | (domain_id << 24) | (split << 23) | (class_idx << 20) | j


def build_dataset(
    spec: DomainSpec,
    n_per_class: int = 40,
    test_fraction: float = 0.25,
    base_seed: int = 0,
    n_samples: int = WINDOW_LEN,
) -> DomainDataset:
    if n_per_class < 2:
        raise ValueError("n_per_class must be >= 2")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = min(max(1, int(round(n_per_class * test_fraction))), n_per_class - 1)
    n_train = n_per_class - n_test
    rpms = spec.speed_band.rpms
    envs = spec.environment

    ds = DomainDataset(spec=spec)
    for split, count, out in ((0, n_train, ds.train), (1, n_test, ds.test)):
        for j in range(count):
            rpm = rpms[j % len(rpms)]
            env = envs[(j // len(rpms)) % len(envs)]
            for c, fault in enumerate(spec.fault_classes):
                seed = window_seed(base_seed, spec.domain_id, split, c, j)
                w = synthesize_window(spec, fault, rpm, seed, environment=env, n_samples=n_samples)
                out.append((w, c))
    return ds


def with_samples(window: SignalWindow, samples: np.ndarray) -> SignalWindow:
    return replace(window, samples=np.asarray(samples, dtype=float))


# -- CSV interchange: domain_id,label,rpm,s0,...,s{N-1} ---------------------


def export_csv(windows: Iterable[SignalWindow], path: str | Path) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for w in windows:
            writer.writerow([w.domain_id, w.label.value, w.shaft_rpm, *(repr(float(v)) for v in w.samples)])
            n += 1
    return n


def import_csv(path: str | Path) -> list[SignalWindow]:
    """Read windows written by :func:`export_csv` (or real data in that layout).

    Imported windows carry seed -1 since their provenance is unknown.
    """
    windows = []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) < 4:
                raise ValueError(f"{path}:{lineno}: expected domain_id,label,rpm,samples...")
            try:
                domain_id = int(row[0])
                label = Fault(row[1])
                rpm = int(float(row[2]))
                samples = np.array([float(v) for v in row[3:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            windows.append(SignalWindow(samples=samples, label=label, domain_id=domain_id, shaft_rpm=rpm, seed=-1))
    return windows


def dataset_from_windows(
    spec: DomainSpec, windows: Sequence[SignalWindow], test_fraction: float, rng: np.random.Generator
) -> DomainDataset:
    """Split imported windows of one domain into class-balanced train/test sets."""
    ds = DomainDataset(spec=spec)
    by_class: dict[int, list[SignalWindow]] = {}
    for w in windows:
        if w.domain_id != spec.domain_id:
            continue
        by_class.setdefault(spec.fault_classes.index(w.label), []).append(w)
    if set(by_class) != set(range(spec.n_classes)):
        raise ValueError(f"domain {spec.domain_id}: every fault class needs windows")
    per_class = min(len(v) for v in by_class.values())
    n_test = min(max(1, int(round(per_class * test_fraction))), per_class - 1)
    for c in sorted(by_class):
        ws = by_class[c]
        idx = rng.permutation(len(ws))[:per_class]
        ds.test.extend((ws[i], c) for i in idx[:n_test])
        ds.train.extend((ws[i], c) for i in idx[n_test:])
    return ds
