"""Command line entry point: gen, encode, train, ablate, report, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import harness, metrics, mtf, signalgen
from . import tensornet as tn
from .harness import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _load(args) -> harness.ExperimentConfig:
    overrides = _parse_overrides(args.set)
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.workers is not None:
        overrides["workers"] = args.workers
    return harness.load_config(args.config, overrides)


def cmd_gen(args) -> int:
    windows = []
    for did in args.domains:
        ds = signalgen.build_dataset(signalgen.make_domain_spec(did), args.n_per_class, args.test_fraction, args.seed)
        pairs = {"train": ds.train, "test": ds.test, "all": ds.train + ds.test}[args.split]
        windows.extend(w for w, _ in pairs)
    n = signalgen.export_csv(windows, args.out)
    print(f"wrote {n} windows to {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    windows = signalgen.import_csv(args.csv)
    images = (mtf.encode(w.samples, args.q_bins, args.size) for w in windows)
    n = mtf.save_images(args.out, images)
    if args.labels:
        Path(args.labels).write_text(
            "".join(f"{w.domain_id},{w.label.value},{w.shaft_rpm}\n" for w in windows), encoding="utf-8"
        )
    print(f"encoded {n} windows to {args.out}")
    return EXIT_OK


def _finish(results: list[metrics.RunResult], run_dir: Path) -> int:
    agg = metrics.aggregate(results)
    for name in ("acc", "la", "fm"):
        cell = agg[name]
        if cell["mean"] is not None:
            print(f"{name.upper()}: {cell['mean']:.4f} +/- {cell['std']:.4f} (n={cell['n']})")
    print(f"run directory: {run_dir}")
    failed = [r for r in results if r.failed]
    for r in failed:
        print(f"seed {r.seed} failed: {r.failed}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = Path(args.run_dir) if args.run_dir else harness.default_run_dir(args.run_root, cfg.name)
    results = harness.run_experiment(cfg, run_dir)
    return _finish(results, run_dir)


def cmd_ablate(args) -> int:
    cfg = _load(args)
    run_dir = Path(args.run_dir) if args.run_dir else harness.default_run_dir(args.run_root, f"{cfg.name}-{args.suite}")
    report = harness.run_ablation(args.suite, cfg, run_dir)
    print(harness.render_report(report), end="")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if (run_dir / "report.json").exists():
        report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
        text = harness.render_report(report)
        (run_dir / "report.md").write_text(text, encoding="utf-8")
        print(text, end="")
        return EXIT_OK
    if not (run_dir / "manifest.json").exists():
        raise ConfigError(f"{run_dir} holds neither manifest.json nor report.json")
    summary = harness.rebuild_summary(run_dir)
    if args.write:
        harness._write_json(run_dir / "summary.json", summary)
    for run in summary["runs"]:
        if run["failed"]:
            print(f"seed {run['seed']}: failed ({run['failed']})")
        else:
            fm = "n/a" if run["fm"] is None else f"{run['fm']:.4f}"
            print(f"seed {run['seed']}: ACC {run['acc']:.4f}  LA {run['la']:.4f}  FM {fm}")
    for name, cell in summary["aggregate"].items():
        if cell["mean"] is not None:
            print(f"{name.upper()} mean {cell['mean']:.4f} std {cell['std']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    fg = tn.FeatureGenerator.create(rng, image_size=args.size, n_filters=args.filters, dtype=np.float64)
    head = tn.ClassifierHead.create(rng, fg.out_dim, 4, dtype=np.float64)
    images = rng.uniform(0.0, 1.0, size=(args.batch, args.size, args.size))
    labels = rng.integers(0, 4, size=args.batch)
    t = time.perf_counter()
    report = tn.grad_check(fg, head, images, labels, args.epsilon, args.tolerance, args.samples, rng)
    elapsed = time.perf_counter() - t
    for name, err in report.per_param.items():
        print(f"{name:16s} {err:.3e}")
    print(
        f"max relative error {report.max_rel_error:.3e} over {report.n_checked} probes "
        f"({report.n_kinks} kink probes replaced) in {elapsed:.1f}s: {'PASS' if report.passed else 'FAIL'}"
    )
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. replay.policy=None")
    p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.add_argument("--run-root", default="runs", help="parent of timestamped run directories")
    p.add_argument("--run-dir", help="explicit run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="emit a synthetic dataset as CSV")
    p.add_argument("--domains", type=int, nargs="+", default=harness.DEFAULT_DOMAINS)
    p.add_argument("--n-per-class", type=int, default=40)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="CSV windows -> MTF image file")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="optional sidecar with domain,label,rpm per image")
    p.add_argument("--q-bins", type=int, default=mtf.N_BINS)
    p.add_argument("--size", type=int, default=mtf.IMAGE_SIZE)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="run one experiment config over its seeds")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation suite against the baseline")
    p.add_argument("--suite", choices=harness.SUITES, required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render summaries from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--write", action="store_true", help="rewrite summary.json from the manifest and logs")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--size", type=int, default=mtf.IMAGE_SIZE)
    p.add_argument("--filters", type=int, default=tn.N_FILTERS)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
