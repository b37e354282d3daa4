"""Growing ensemble of episode models and its training loop.

Each episode spawns a fresh feature generator with one classifier head per
selected domain.  Older models are frozen; a domain is predicted by
averaging the softmax outputs of every model that holds a head for it.
Domains are addressed by their position in the training sequence (1-based).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensornet as tn


@dataclass
class TrainingConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpisodeModel:
    episode_k: int
    fg: tn.FeatureGenerator
    heads: dict[int, tn.ClassifierHead]
    seed: int = 0

    @property
    def trained_domains(self) -> frozenset[int]:
        return frozenset(self.heads)

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view over the feature generator and all heads."""
        out = {f"fg.{k}": v for k, v in self.fg.params.items()}
        for d in sorted(self.heads):
            out.update({f"head.{d}.{k}": v for k, v in self.heads[d].params.items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, for checkpoints."""
        out = self.parameters()
        out.update({f"fg.{k}": v for k, v in self.fg.buffers.items()})
        return out

    def checkpoint_hash(self) -> str:
        return tn.params_hash(self.state())

    def predict_proba(self, images: np.ndarray, domain: int) -> np.ndarray:
        return tn.predict_proba(self.fg, self.heads[domain], images)


@dataclass
class EnsembleState:
    domain_catalog: dict[int, int]
    image_size: int = 32
    n_filters: int = tn.N_FILTERS
    models: list[EpisodeModel] = field(default_factory=list)

    def contributors(self, domain: int) -> list[EpisodeModel]:
        return [m for m in self.models if domain in m.heads]


def new_episode(state: EnsembleState, k: int, selected: Sequence[int] | set[int], seed: int) -> EpisodeModel:
    """Append a freshly initialised model for episode ``k``."""
    selected = sorted(set(int(d) for d in selected))
    if k != len(state.models) + 1:
        raise ValueError(f"episode {k} out of sequence (have {len(state.models)} models)")
    if k not in selected:
        raise ValueError(f"selected domains {selected} must include the current domain {k}")
    if any(d < 1 or d > k for d in selected):
        raise ValueError(f"selected domains {selected} must lie in 1..{k}")
    missing = [d for d in selected if d not in state.domain_catalog]
    if missing:
        raise ValueError(f"domains {missing} absent from the catalog")
    rng = np.random.default_rng(seed)
    fg = tn.FeatureGenerator.create(rng, image_size=state.image_size, n_filters=state.n_filters)
    heads = {d: tn.ClassifierHead.create(rng, fg.out_dim, state.domain_catalog[d]) for d in selected}
    model = EpisodeModel(episode_k=k, fg=fg, heads=heads, seed=seed)
    state.models.append(model)
    return model


def predict_domain(state: EnsembleState, images: np.ndarray, domain: int) -> np.ndarray:
    """Average class probabilities over every model holding a head for ``domain``."""
    models = state.contributors(domain)
    if not models:
        raise LookupError(f"no model has been trained on domain {domain}")
    x = np.asarray(images)
    single = x.ndim == 2
    batch = x[None] if single else x
    total = np.zeros((len(batch), state.domain_catalog[domain]))
    for m in models:
        total += m.predict_proba(batch, domain)
    probs = total / len(models)
    return probs[0] if single else probs


def mean_log_likelihood(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    p = probs[np.arange(len(labels)), labels]
    return float(np.mean(np.log(np.maximum(p, np.finfo(float).tiny))))


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


@dataclass
class EpisodeStats:
    losses: list[float]
    mean_log_p: dict[int, float]
    train_accuracy: dict[int, float]
    batch_composition: list[dict[int, int]]


class _Cycler:
    """Endless shuffled stream over one domain's indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            step = min(count, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + step])
            self.pos += step
            count -= step
        return np.concatenate(out)


def train_episode(
    model: EpisodeModel,
    current: tuple[np.ndarray, np.ndarray],
    replay: Mapping[int, tuple[np.ndarray, np.ndarray]],
    hyper: TrainingConfig,
    rng: np.random.Generator,
    record_batches: bool = False,
) -> EpisodeStats:
    """Train ``model`` on its current domain plus replayed exemplars.

    Every mini-batch draws ``batch_size // b`` samples from each of the
    ``b`` trained domains; small replay sets are cycled (resampled) as
    needed.  An epoch is ``ceil(n_current / batch_size)`` mini-batches.
    Returns per-domain mean log-likelihoods of the trained model on the data
    it saw (current train split, replay exemplars).
    """
    hyper.validate()
    k = model.episode_k
    expected = set(model.heads) - {k}
    if set(replay) != expected:
        raise ValueError(f"replay covers {sorted(replay)}, expected {sorted(expected)}")
    data = {k: (np.asarray(current[0]), np.asarray(current[1]))}
    for d, (x, y) in replay.items():
        if len(x) == 0:
            raise ValueError(f"empty replay set for domain {d}")
        data[d] = (np.asarray(x), np.asarray(y))
    domains = sorted(data)
    b = len(domains)
    per_domain = hyper.batch_size // b
    if per_domain < 1:
        raise ValueError(f"batch_size {hyper.batch_size} cannot hold one sample from each of {b} domains")
    if b == 1 and len(data[k][0]) < 2:
        raise ValueError("need at least two training samples")

    streams = {d: _Cycler(len(data[d][0]), rng) for d in domains}
    steps_per_epoch = int(np.ceil(len(data[k][0]) / hyper.batch_size))
    params = model.parameters()
    velocity: dict[str, np.ndarray] = {}
    losses: list[float] = []
    composition: list[dict[int, int]] = []
    for _ in range(hyper.epochs):
        for _ in range(steps_per_epoch):
            groups = {}
            for d in domains:
                idx = streams[d].take(per_domain)
                groups[d] = (data[d][0][idx], data[d][1][idx])
            loss, grads = tn.multi_loss_and_grad(model.fg, model.heads, groups)
            flat = {f"fg.{n}": g for n, g in grads.pop("fg").items()}
            for d, hg in grads.items():
                flat.update({f"head.{d}.{n}": g for n, g in hg.items()})
            tn.sgd_step(params, flat, velocity, hyper.lr, hyper.momentum)
            losses.append(loss)
            if record_batches:
                composition.append({d: len(groups[d][1]) for d in domains})

    mean_log_p, train_acc = {}, {}
    for d in domains:
        probs = model.predict_proba(data[d][0], d)
        mean_log_p[d] = mean_log_likelihood(probs, data[d][1])
        train_acc[d] = accuracy(probs, data[d][1])
    return EpisodeStats(losses=losses, mean_log_p=mean_log_p, train_accuracy=train_acc, batch_composition=composition)
