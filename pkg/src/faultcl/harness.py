"""Experiment orchestration: configuration, the episode loop, persistence and ablations."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import curriculum, ensemble, metrics, mtf, scheduler, signalgen
from . import tensornet as tn
from .curriculum import Ordering

log = logging.getLogger(__name__)

DEFAULT_DOMAINS = [1, 2, 7, 8, 13, 14]
POLICIES = ("Boosting", "Balanced", "None")
SUITES = ("ordering", "replay", "corruption")

BASELINE_NOTE = (
    "Baseline = AsGiven ordering + Boosting replay policy + unbounded buffer capacity + no corruption."
)


class ConfigError(ValueError):
    pass


@dataclass
class ReplayConfig:
    capacity_domains: int | None = None
    policy: str = "Boosting"


@dataclass
class MtfConfig:
    q_bins: int = mtf.N_BINS
    image_size: int = mtf.IMAGE_SIZE
    window_len: int = signalgen.WINDOW_LEN


@dataclass
class ExperimentConfig:
    name: str = "baseline"
    domain_ids: list[int] = field(default_factory=lambda: list(DEFAULT_DOMAINS))
    ordering: str = "AsGiven"
    corruption: str = "None"
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    b: int = 4
    n_per_class: int = 40
    test_fraction: float = 0.25
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    training: ensemble.TrainingConfig = field(default_factory=ensemble.TrainingConfig)
    mtf: MtfConfig = field(default_factory=MtfConfig)
    workers: int = 1

    def validate(self) -> None:
        try:
            if not self.domain_ids:
                raise ConfigError("domain_ids is empty")
            if len(set(self.domain_ids)) != len(self.domain_ids):
                raise ConfigError("domain_ids must be distinct")
            for d in self.domain_ids:
                signalgen.make_domain_spec(d)
            Ordering(self.ordering)
            curriculum.corruption_level(self.corruption)
            if self.replay.policy not in POLICIES:
                raise ConfigError(f"replay.policy must be one of {POLICIES}")
            if self.replay.capacity_domains is not None and self.replay.capacity_domains < 1:
                raise ConfigError("replay.capacity_domains must be >= 1 or null")
            if self.b < 1:
                raise ConfigError("b must be >= 1")
            if not self.seeds or len(set(self.seeds)) != len(self.seeds):
                raise ConfigError("seeds must be non-empty and distinct")
            if any(not 0 <= s < 2**31 for s in self.seeds):
                raise ConfigError("seeds must lie in [0, 2**31)")
            if self.n_per_class < 2:
                raise ConfigError("n_per_class must be >= 2")
            if not 0 < self.test_fraction < 1:
                raise ConfigError("test_fraction must be in (0, 1)")
            if self.mtf.q_bins < 2 or self.mtf.window_len < self.mtf.q_bins:
                raise ConfigError("invalid mtf parameters")
            if not 1 <= self.mtf.image_size <= self.mtf.window_len:
                raise ConfigError("mtf.image_size must be in 1..window_len")
            tn.feature_dim(self.mtf.image_size)
            self.training.validate()
            if self.workers < 1:
                raise ConfigError("workers must be >= 1")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    data = dict(data or {})
    nested = {
        "replay": ReplayConfig,
        "training": ensemble.TrainingConfig,
        "mtf": MtfConfig,
    }
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in nested:
            sub_known = {f.name for f in dataclasses.fields(nested[key])}
            value = dict(value or {})
            bad = set(value) - sub_known
            if bad:
                raise ConfigError(f"unknown keys under {key}: {sorted(bad)}")
            kwargs[key] = nested[key](**value)
        else:
            kwargs[key] = value
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.domain_ids = [int(d) for d in cfg.domain_ids]
    cfg.seeds = [int(s) for s in cfg.seeds]
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config and apply dotted ``key.sub=value`` overrides."""
    import yaml

    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)


# -- per-seed pipeline ---------------------------------------------------------


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


_PURPOSE = {"corrupt": 1, "buffer": 2, "select": 3, "init": 4, "train": 5, "baseline": 6}


@dataclass
class EncodedDomain:
    domain_id: int
    n_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def prepare_domains(config: ExperimentConfig, seed: int) -> dict[int, EncodedDomain]:
    """Synthesise, corrupt and MTF-encode every configured domain for one seed."""
    level = curriculum.corruption_level(config.corruption)
    out = {}
    for did in config.domain_ids:
        spec = signalgen.make_domain_spec(did)
        ds = signalgen.build_dataset(spec, config.n_per_class, config.test_fraction, seed, config.mtf.window_len)
        ds = curriculum.corrupt_dataset(ds, level, _rng(seed, _PURPOSE["corrupt"], did))
        enc = lambda pairs: mtf.encode_batch((w.samples for w, _ in pairs), config.mtf.q_bins, config.mtf.image_size)
        out[did] = EncodedDomain(
            domain_id=did,
            n_classes=spec.n_classes,
            train_x=enc(ds.train),
            train_y=np.array([y for _, y in ds.train], dtype=np.int64),
            test_x=enc(ds.test),
            test_y=np.array([y for _, y in ds.test], dtype=np.int64),
        )
    return out


def baseline_accuracies(
    config: ExperimentConfig, seed: int, domains: Mapping[int, EncodedDomain] | None = None
) -> dict[int, float]:
    """Test accuracy of a single model trained on each domain in isolation."""
    domains = domains if domains is not None else prepare_domains(config, seed)
    out = {}
    for did in config.domain_ids:
        d = domains[did]
        state = ensemble.EnsembleState(domain_catalog={1: d.n_classes}, image_size=config.mtf.image_size)
        model = ensemble.new_episode(state, 1, {1}, seed=int(_rng(seed, _PURPOSE["baseline"], did).integers(2**31)))
        ensemble.train_episode(
            model, (d.train_x, d.train_y), {}, config.training, _rng(seed, _PURPOSE["baseline"], did, 1)
        )
        out[did] = ensemble.accuracy(ensemble.predict_domain(state, d.test_x, 1), d.test_y)
    return out


def _select(
    config: ExperimentConfig,
    k: int,
    buffer: scheduler.ReplayBuffer,
    weights: scheduler.DomainWeights | None,
    rng: np.random.Generator,
) -> tuple[set[int], dict[int, float] | None]:
    b_k = min(k, config.b)
    policy = config.replay.policy
    if k == 1 or policy == "None" or b_k == 1:
        return {k}, None
    stored = [d for d in buffer.domains() if d < k]
    if not stored:
        return {k}, None
    if policy == "Balanced":
        losses = {d: buffer.last_loss.get(d, 0.0) for d in stored}
        return {k} | scheduler.balanced_pick(losses, b_k - 1), None
    if weights is None:
        weights = scheduler.uniform_weights(stored, k - 1)
    else:
        # domains evicted since the weights were computed cannot be replayed
        weights = scheduler.DomainWeights(weights.episode_k, {d: (w if d in stored else 0.0) for d, w in weights.w.items()})
    return scheduler.select_domains(weights, b_k, k, rng), {d: weights.get(d) for d in stored}


def run_seed(
    config: ExperimentConfig,
    seed: int,
    run_dir: Path | None = None,
    baseline_acc: Mapping[int, float] | None = None,
) -> tuple[metrics.RunResult, dict, list[tuple[int, int, int, float]], dict]:
    """Full continual run for one seed; returns (result, manifest entry, accuracy rows, timings)."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    domains = prepare_domains(config, seed)
    timings["prepare"] = time.perf_counter() - t0

    ordering = Ordering(config.ordering)
    if ordering is not Ordering.AS_GIVEN and baseline_acc is None:
        t = time.perf_counter()
        baseline_acc = baseline_accuracies(config, seed, domains)
        timings["baseline"] = time.perf_counter() - t
    order = curriculum.order_domains(ordering, config.domain_ids, baseline_acc)
    D = len(order)
    pos = {p: domains[did] for p, did in enumerate(order, start=1)}

    state = ensemble.EnsembleState(
        domain_catalog={p: d.n_classes for p, d in pos.items()}, image_size=config.mtf.image_size
    )
    buffer = scheduler.ReplayBuffer(capacity_domains=config.replay.capacity_domains)
    matrix = metrics.AccuracyMatrix(D)
    select_rng = _rng(seed, _PURPOSE["select"])
    buffer_rng = _rng(seed, _PURPOSE["buffer"])
    weights: scheduler.DomainWeights | None = None
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints" / f"seed{seed}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    episodes = []
    acc_rows = []
    for k in range(1, D + 1):
        t = time.perf_counter()
        selected, weights_used = _select(config, k, buffer, weights, select_rng)
        init_seed = int(_rng(seed, _PURPOSE["init"], k).integers(2**31))
        model = ensemble.new_episode(state, k, selected, seed=init_seed)
        replay = {d: buffer.exemplars(d) for d in sorted(selected - {k})}
        cur = pos[k]
        stats = ensemble.train_episode(
            model, (cur.train_x, cur.train_y), replay, config.training, _rng(seed, _PURPOSE["train"], k)
        )
        evicted: list[int] = []
        if config.replay.policy != "None":
            evicted = scheduler.admit_domain(buffer, k, cur.train_x, cur.train_y, buffer_rng)

        row = []
        for i in range(1, k + 1):
            probs = ensemble.predict_domain(state, pos[i].test_x, i)
            a = ensemble.accuracy(probs, pos[i].test_y)
            row.append(a)
            acc_rows.append((seed, k, i, a))
        matrix.set_row(k, row)

        # ensemble risk on each stored domain drives the next episode's draw
        ens_log_p = {}
        for d in buffer.domains():
            x, y = buffer.exemplars(d)
            ens_log_p[d] = min(0.0, ensemble.mean_log_likelihood(ensemble.predict_domain(state, x, d), y))
            buffer.last_loss[d] = -ens_log_p[d]
        weights = scheduler.compute_weights(ens_log_p, k) if ens_log_p else None

        ckpt_path = None
        if ckpt_dir is not None:
            ckpt_path = f"checkpoints/seed{seed}/episode{k}.dfnn"
            tn.save_params(run_dir / ckpt_path, model.state())
        episodes.append(
            {
                "episode": k,
                "domain_id": order[k - 1],
                "selected": sorted(selected),
                "selection_weights": {str(d): w for d, w in (weights_used or {}).items()},
                "init_seed": init_seed,
                "final_loss": stats.losses[-1],
                "train_mean_log_p": {str(d): v for d, v in stats.mean_log_p.items()},
                "train_accuracy": {str(d): v for d, v in stats.train_accuracy.items()},
                "ensemble_loss": {str(d): -v for d, v in ens_log_p.items()},
                "next_weights": {str(d): w for d, w in (weights.w.items() if weights else [])},
                "evicted": evicted,
                "accuracy_row": row,
                "model_hashes": [m.checkpoint_hash() for m in state.models],
                "checkpoint": ckpt_path,
            }
        )
        timings[f"episode{k}"] = time.perf_counter() - t

    acc_v, la_v, fm_v = metrics.run_metrics(matrix)
    per_final = {p: matrix.get(D, p) for p in range(1, D + 1)}
    per_prf = {}
    for p in range(1, D + 1):
        pred = np.argmax(ensemble.predict_domain(state, pos[p].test_x, p), axis=1)
        conf = metrics.confusion_matrix(pos[p].test_y, pred, pos[p].n_classes)
        per_prf[p] = metrics.prf(conf).to_dict()
    result = metrics.RunResult(
        seed=seed,
        acc=acc_v,
        la=la_v,
        fm=fm_v,
        per_domain_final=per_final,
        per_domain_prf=per_prf,
        matrix=[matrix.row(l) for l in range(1, D + 1)],
    )

    if run_dir is not None:
        buf_dir = run_dir / "checkpoints" / f"seed{seed}" / "buffer"
        buf_dir.mkdir(parents=True, exist_ok=True)
        for d in buffer.domains():
            x, _ = buffer.exemplars(d)
            mtf.save_images(buf_dir / f"position{d}.mtf", (mtf.MtfImage(im, config.mtf.window_len, config.mtf.q_bins) for im in x))
        ens_manifest = {
            "seed": seed,
            "hyperparameters": dataclasses.asdict(config.training),
            "episodes": [
                {"episode": m.episode_k, "trained_domains": sorted(m.heads), "seed": m.seed, "checkpoint": f"episode{m.episode_k}.dfnn"}
                for m in state.models
            ],
            "buffer": {
                str(d): {"file": f"buffer/position{d}.mtf", "labels": buffer.exemplars(d)[1].tolist(), "last_loss": buffer.last_loss.get(d)}
                for d in buffer.domains()
            },
        }
        _write_json(run_dir / "checkpoints" / f"seed{seed}" / "ensemble.json", ens_manifest)

    entry = {
        "seed": seed,
        "permutation": order,
        "baseline_accuracy": {str(d): v for d, v in (baseline_acc or {}).items()},
        "episodes": episodes,
    }
    timings["total"] = time.perf_counter() - t0
    return result, entry, acc_rows, timings


def _seed_worker(args) -> tuple:
    config, seed, run_dir, baseline_acc = args
    from threadpoolctl import threadpool_limits

    # one BLAS thread keeps float reductions, and thus results, reproducible
    with threadpool_limits(limits=1):
        try:
            return run_seed(config, seed, run_dir, baseline_acc)
        except (ArithmeticError, ValueError, LookupError, RuntimeError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            failed = metrics.RunResult(seed=seed, acc=float("nan"), la=float("nan"), fm=None, failed=f"{type(exc).__name__}: {exc}")
            return failed, {"seed": seed, "failed": failed.failed}, [], {}


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def default_run_dir(root: str | Path, name: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(root) / f"{stamp}-{name}"


def summarize(config_dict: Mapping[str, Any], results: list[metrics.RunResult]) -> dict:
    return {
        "name": config_dict.get("name"),
        "note": BASELINE_NOTE,
        "aggregate": metrics.aggregate(results),
        "runs": [r.to_dict() for r in sorted(results, key=lambda r: r.seed)],
    }


def run_experiment(
    config: ExperimentConfig,
    run_dir: str | Path | None = None,
    baseline_acc: Mapping[int, Mapping[int, float]] | None = None,
) -> list[metrics.RunResult]:
    """Run every seed of ``config``; persist manifest, logs and summary under ``run_dir``.

    ``baseline_acc`` optionally supplies per-seed isolated-training
    accuracies so that orderings can share one baseline pass.
    """
    config.validate()
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        (out / "logs").mkdir(parents=True, exist_ok=True)
    jobs = [(config, s, out, (baseline_acc or {}).get(s)) for s in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(jobs))) as pool:
            outputs = list(pool.map(_seed_worker, jobs))
    else:
        outputs = [_seed_worker(j) for j in jobs]

    results = [o[0] for o in outputs]
    if out is not None:
        manifest = {
            "config": config.to_dict(),
            "note": BASELINE_NOTE,
            "accuracy_log": "logs/accuracy.csv",
            "timings": "logs/timings.json",
            "seeds": [o[1] for o in outputs],
        }
        _write_json(out / "manifest.json", manifest)
        metrics.write_accuracy_csv(out / "logs" / "accuracy.csv", [row for o in outputs for row in o[2]])
        _write_json(out / "logs" / "timings.json", {str(o[0].seed): o[3] for o in outputs})
        _write_json(out / "summary.json", summarize(config.to_dict(), results))
    return results


def rebuild_summary(run_dir: str | Path) -> dict:
    """Recompute a run's summary from its manifest and accuracy log alone."""
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    matrices = metrics.read_accuracy_csv(run_dir / manifest["accuracy_log"])
    stored = {}
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        with open(summary_path, encoding="utf-8") as f:
            stored = {r["seed"]: r for r in json.load(f)["runs"]}
    results = []
    for entry in manifest["seeds"]:
        seed = entry["seed"]
        if "failed" in entry:
            results.append(metrics.RunResult(seed=seed, acc=float("nan"), la=float("nan"), fm=None, failed=entry["failed"]))
            continue
        m = matrices[seed]
        acc_v, la_v, fm_v = metrics.run_metrics(m)
        prf = {int(k): v for k, v in stored.get(seed, {}).get("per_domain_prf", {}).items()}
        results.append(
            metrics.RunResult(
                seed=seed,
                acc=acc_v,
                la=la_v,
                fm=fm_v,
                per_domain_final={p: m.get(m.D, p) for p in range(1, m.D + 1)},
                per_domain_prf=prf,
                matrix=[m.row(l) for l in range(1, m.D + 1)],
            )
        )
    return summarize(manifest["config"], results)


# -- ablations -----------------------------------------------------------------


def ablation_variants(suite: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    suite = suite.lower()
    if suite == "ordering":
        return [
            ("Lowest First", base.replace(ordering="LowestFirst", name=f"{base.name}-lowest-first")),
            ("Highest First", base.replace(ordering="HighestFirst", name=f"{base.name}-highest-first")),
            ("Alternated", base.replace(ordering="Alternated", name=f"{base.name}-alternated")),
        ]
    if suite == "replay":
        return [
            ("9 domains", base.replace(replay=ReplayConfig(9, "Boosting"), name=f"{base.name}-cap9")),
            ("14 domains", base.replace(replay=ReplayConfig(14, "Boosting"), name=f"{base.name}-cap14")),
            ("Balanced", base.replace(replay=ReplayConfig(None, "Balanced"), name=f"{base.name}-balanced")),
        ]
    if suite == "corruption":
        return [
            ("Mild", base.replace(corruption="Mild", name=f"{base.name}-mild")),
            ("Moderate", base.replace(corruption="Moderate", name=f"{base.name}-moderate")),
            ("High", base.replace(corruption="High", name=f"{base.name}-high")),
        ]
    raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")


def _metric_column(results: list[metrics.RunResult], name: str) -> dict[int, float]:
    return {r.seed: getattr(r, name) for r in results if r.failed is None and getattr(r, name) is not None}


def compare(base: list[metrics.RunResult], other: list[metrics.RunResult]) -> dict[str, float | None]:
    """Paired Wilcoxon p-values (by seed) of ``other`` against ``base``."""
    out: dict[str, float | None] = {}
    for name in ("acc", "la", "fm"):
        a, b = _metric_column(other, name), _metric_column(base, name)
        common = sorted(set(a) & set(b))
        out[name] = metrics.paired_test([a[s] for s in common], [b[s] for s in common]) if len(common) >= 5 else None
    return out


def run_ablation(suite: str, base: ExperimentConfig, run_root: str | Path | None = None) -> dict:
    """Run a suite's three variants plus the baseline and tabulate ACC/LA/FM."""
    variants = ablation_variants(suite, base)
    root = Path(run_root) if run_root is not None else None
    sub = (lambda name: root / name) if root is not None else (lambda name: None)

    base_results = run_experiment(base, sub("baseline"))
    shared_baseline = None
    if suite.lower() == "ordering":
        cfg = base.replace(ordering="AsGiven")
        shared_baseline = {s: baseline_accuracies(cfg, s) for s in base.seeds}

    rows = []
    for label, cfg in variants:
        results = run_experiment(cfg, sub(cfg.name), baseline_acc=shared_baseline)
        rows.append(
            {
                "strategy": label,
                "config": cfg.name,
                "aggregate": metrics.aggregate(results),
                "p_vs_baseline": compare(base_results, results),
            }
        )
    report = {
        "suite": suite.lower(),
        "note": BASELINE_NOTE,
        "baseline": {"config": base.name, "aggregate": metrics.aggregate(base_results)},
        "rows": rows,
    }
    if root is not None:
        _write_json(root / "report.json", report)
        (root / "report.md").write_text(render_report(report), encoding="utf-8")
    return report


def _fmt(agg: Mapping[str, Any], name: str, scale: float, unit: str) -> str:
    cell = agg.get(name) or {}
    if cell.get("mean") is None:
        return "n/a"
    return f"{cell['mean'] * scale:.2f}{unit} ± {cell['std'] * scale:.2f}"


def render_report(report: Mapping[str, Any]) -> str:
    lines = [f"# {report['suite']} ablation", "", f"_{report['note']}_", ""]
    lines.append("| Strategy | ACC | LA | FM (x1e-3) | p(ACC) | p(LA) | p(FM) |")
    lines.append("|---|---|---|---|---|---|---|")
    base = report["baseline"]["aggregate"]
    lines.append(
        f"| Baseline | {_fmt(base, 'acc', 100, '%')} | {_fmt(base, 'la', 100, '%')} | {_fmt(base, 'fm', 1e3, '')} | | | |"
    )
    for row in report["rows"]:
        agg, p = row["aggregate"], row["p_vs_baseline"]
        ps = " | ".join("n/a" if p[m] is None else f"{p[m]:.4f}" for m in ("acc", "la", "fm"))
        lines.append(
            f"| {row['strategy']} | {_fmt(agg, 'acc', 100, '%')} | {_fmt(agg, 'la', 100, '%')} | {_fmt(agg, 'fm', 1e3, '')} | {ps} |"
        )
    return "\n".join(lines) + "\n"


def workers_default() -> int:
    return max(1, min(10, os.cpu_count() or 1))
