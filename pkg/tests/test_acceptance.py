"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The trend criteria train the full 6-domain benchmark over 10 seeds for five
configurations; expect tens of minutes on a single core.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from faultcl import ensemble, harness, metrics, mtf, scheduler, signalgen
from faultcl import tensornet as tn
from faultcl.harness import ExperimentConfig, ReplayConfig


def report(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    record_property("acceptance", line)
    assert ok, line


# -- shared benchmark runs -----------------------------------------------------

BENCH = {
    "boosting": {},
    "none": {"replay": ReplayConfig(policy="None")},
    "balanced": {"replay": ReplayConfig(policy="Balanced")},
    "mild": {"corruption": "Mild"},
    "high": {"corruption": "High"},
}


@pytest.fixture(scope="module")
def bench_root(tmp_path_factory):
    return tmp_path_factory.mktemp("bench")


@pytest.fixture(scope="module")
def bench(bench_root):
    cache = {}

    def get(name):
        if name not in cache:
            cfg = ExperimentConfig(name=name, workers=harness.workers_default(), **BENCH[name])
            t = time.perf_counter()
            results = harness.run_experiment(cfg, bench_root / name)
            cache[name] = (results, time.perf_counter() - t)
        return cache[name][0]

    get.elapsed = lambda: sum(v[1] for v in cache.values())
    return get


# -- 1 -------------------------------------------------------------------------


def test_criterion_1_gradcheck(record_property):
    rng = np.random.default_rng(0)
    fg = tn.FeatureGenerator.create(rng, dtype=np.float64)
    head = tn.ClassifierHead.create(rng, fg.out_dim, 4, dtype=np.float64)
    spec = signalgen.make_domain_spec(1)
    images = mtf.encode_batch(signalgen.synthesize_window(spec, f, 600, 7).samples for f in spec.fault_classes[:2])
    t = time.perf_counter()
    rep = tn.grad_check(fg, head, images.astype(np.float64), np.array([0, 1]), epsilon=1e-4, tolerance=1e-3, n_samples=50, rng=rng)
    elapsed = time.perf_counter() - t
    # 50 probes in each of the 8 feature-generator arrays plus the head
    ok = rep.passed and elapsed < 30.0 and len(rep.per_param) == 10 and rep.n_checked >= 50 * 8
    report(record_property, 1, ok, f"max rel err {rep.max_rel_error:.2e} over {rep.n_checked} probes in {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------


def _brute_metrics(a):
    D = len(a)
    acc_v = sum(a[D - 1][i] for i in range(D)) / D
    la_v = sum(a[i][i] for i in range(D)) / D
    total = 0.0
    for i in range(D - 1):
        drops = []
        for l in range(D - 1):
            if l >= i:
                drops.append(a[l][i] - a[D - 1][i])
        total += max(drops)
    return acc_v, la_v, total / (D - 1)


def test_criterion_2_metric_oracles(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        rows = [[float(v) for v in rng.uniform(size=l + 1)] for l in range(5)]
        mat = metrics.AccuracyMatrix.from_rows(rows)
        got = (metrics.acc(mat), metrics.la(mat), metrics.fm(mat))
        worst = max(worst, max(abs(g - r) for g, r in zip(got, _brute_metrics(rows))))
    ex = metrics.AccuracyMatrix.from_rows([[1.0], [0.9, 0.8]])
    example = (metrics.acc(ex), metrics.la(ex), metrics.fm(ex))
    ok_example = all(abs(g - r) < 1e-12 for g, r in zip(example, (0.85, 0.9, 0.1)))
    ok = worst < 1e-12 and ok_example
    report(record_property, 2, ok, f"200 random 5x5 matrices max diff {worst:.1e}; D=2 example {tuple(round(v, 12) for v in example)}")


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_ensemble_average(record_property):
    rng = np.random.default_rng(3)
    catalog = {p: signalgen.make_domain_spec(d).n_classes for p, d in enumerate(harness.DEFAULT_DOMAINS, 1)}
    state = ensemble.EnsembleState(domain_catalog=catalog)
    for k in range(1, 7):
        past = [d for d in range(1, k) if rng.uniform() < 0.6]
        model = ensemble.new_episode(state, k, {k, *past}, seed=int(rng.integers(2**31)))
        # perturb batch-norm statistics so models are not interchangeable
        for v in model.fg.buffers.values():
            v += rng.uniform(0.0, 0.2, size=v.shape).astype(v.dtype)
    pool = mtf.encode_batch(rng.normal(size=(60, 512)))
    worst_diff, worst_sum, pairs = 0.0, 0.0, 0
    for _ in range(120):
        x = pool[rng.integers(len(pool))]
        domain = int(rng.integers(1, 7))
        got = ensemble.predict_domain(state, x, domain)
        num = np.zeros(catalog[domain])
        den = 0
        for model in state.models:
            indicator = 1 if domain in model.trained_domains else 0
            if indicator:
                feats, _ = model.fg.forward(x[None], training=False)
                num += tn.softmax(model.heads[domain].logits(feats))[0]
            den += indicator
        worst_diff = max(worst_diff, float(np.max(np.abs(got - num / den))))
        worst_sum = max(worst_sum, abs(float(got.sum()) - 1.0))
        pairs += 1
    ok = pairs >= 100 and worst_diff < 1e-9 and worst_sum < 1e-6
    report(record_property, 3, ok, f"{pairs} pairs, max |diff| {worst_diff:.1e}, max |sum-1| {worst_sum:.1e}")


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_boosting_weights(record_property):
    w = scheduler.compute_weights({1: math.log(0.9), 2: math.log(0.5)}, 2)
    ok_hand = abs(w.get(1) - 0.357) < 1e-3 and abs(w.get(2) - 0.643) < 1e-3
    rng = np.random.default_rng(4)
    worst_shift = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 10))
        logp = {d: float(-rng.exponential(2.0)) for d in range(1, k + 1)}
        c = float(rng.uniform(0, 20))
        a = scheduler.compute_weights(logp, k)
        b = scheduler.compute_weights({d: v - c for d, v in logp.items()}, k)
        worst_shift = max(worst_shift, max(abs(a.get(d) - b.get(d)) for d in range(1, k + 1)))
    weights = scheduler.compute_weights({1: math.log(0.9), 2: math.log(0.5), 3: math.log(0.7), 4: math.log(0.3)}, 4)
    counts = dict.fromkeys(range(1, 5), 0)
    for _ in range(10_000):
        for d in scheduler.select_domains(weights, 2, 5, rng) - {5}:
            counts[d] += 1
    worst_mc = max(abs(counts[d] / 10_000 - weights.get(d)) for d in counts)
    ok = ok_hand and worst_shift < 1e-12 and worst_mc <= 0.02
    report(
        record_property,
        4,
        ok,
        f"hand example {w.get(1):.4f}/{w.get(2):.4f}; shift diff {worst_shift:.1e}; Monte Carlo max dev {worst_mc:.4f}",
    )


# -- 5 -------------------------------------------------------------------------


def _single_shot(x, q, s):
    """Independent reference: rank bins, histogram transitions, block means by reshape."""
    n = len(x)
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(x, kind="stable")] = np.arange(n)
    bins = ranks * q // n
    counts, _, _ = np.histogram2d(bins[:-1], bins[1:], bins=q, range=[[0, q], [0, q]])
    rows = counts.sum(axis=1, keepdims=True)
    w = np.where(rows > 0, counts / np.where(rows > 0, rows, 1), 0.0)
    field = w[np.ix_(bins, bins)]
    return field.reshape(s, n // s, s, n // s).mean(axis=(1, 3))


def test_criterion_5_mtf_pipeline(record_property):
    cfg = ExperimentConfig()
    n_windows, stochastic_ok, range_ok, affine_ok = 0, True, True, True
    for seed in cfg.seeds:
        for did in cfg.domain_ids:
            ds = signalgen.build_dataset(signalgen.make_domain_spec(did), cfg.n_per_class, cfg.test_fraction, seed)
            for w, _ in ds.train + ds.test:
                bins = mtf.quantize(w.samples, mtf.N_BINS)
                tm = mtf.transition_matrix(bins, mtf.N_BINS)
                sums = tm.sum(axis=1)
                stochastic_ok &= bool(np.all(tm >= 0) and np.all((np.abs(sums - 1) < 1e-12) | (sums == 0)))
                img = mtf.aggregate(mtf.mtf_field(bins, tm), mtf.IMAGE_SIZE).pixels
                range_ok &= bool(img.min() >= 0.0 and img.max() <= 1.0)
                if seed == cfg.seeds[0]:
                    affine_ok &= mtf.encode(3 * w.samples + 5).pixels.tobytes() == img.tobytes()
                n_windows += 1
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        x = rng.normal(size=512) if i % 2 else rng.standard_t(2, size=512)
        worst = max(worst, float(np.max(np.abs(mtf.encode(x).pixels - _single_shot(x, mtf.N_BINS, mtf.IMAGE_SIZE)))))
    ok = stochastic_ok and range_ok and affine_ok and worst < 1e-12
    report(
        record_property,
        5,
        ok,
        f"{n_windows} windows: row-stochastic {stochastic_ok}, pixels in [0,1] {range_ok}, "
        f"affine pixel-exact {affine_ok}; 100-window reference max diff {worst:.1e}",
    )


# -- 6, 7: from the baseline benchmark -------------------------------------------


def test_criterion_6_frozen_models(record_property, bench, bench_root):
    bench("boosting")
    manifest = json.loads((bench_root / "boosting" / "manifest.json").read_text())
    stable, checked = True, 0
    for entry in manifest["seeds"]:
        episodes = entry["episodes"]
        for l, ep in enumerate(episodes):
            for later in episodes[l:]:
                stable &= later["model_hashes"][: l + 1] == ep["model_hashes"][: l + 1]
            ckpt = bench_root / "boosting" / ep["checkpoint"]
            stable &= tn.params_hash(tn.read_params(ckpt)) == episodes[-1]["model_hashes"][l]
            checked += 1
    report(record_property, 6, stable and checked == 60, f"{checked} episode checkpoints hash-identical through the run: {stable}")


def test_criterion_7_plasticity(record_property, bench, bench_root):
    bench("boosting")
    manifest = json.loads((bench_root / "boosting" / "manifest.json").read_text())
    good, worst = 0, 1.0
    for entry in manifest["seeds"]:
        accs = [ep["train_accuracy"][str(ep["episode"])] for ep in entry["episodes"]]
        worst = min(worst, min(accs))
        good += all(a >= 0.95 for a in accs)
    report(record_property, 7, good >= 9, f"{good}/10 seeds reach >= 95% train accuracy in every episode (lowest {worst:.3f})")


# -- 8 -------------------------------------------------------------------------


def _column(results, name):
    return [getattr(r, name) for r in sorted(results, key=lambda r: r.seed)]


def test_criterion_8a_boosting_vs_none(record_property, bench):
    boost, none = bench("boosting"), bench("none")
    fb, fn = _column(boost, "fm"), _column(none, "fm")
    p = metrics.paired_test(fb, fn)
    ok = np.mean(fb) < np.mean(fn) and p < 0.05
    report(record_property, "8a", ok, f"FM Boosting {np.mean(fb):.4f} vs None {np.mean(fn):.4f}, Wilcoxon p={p:.4f}")


def test_criterion_8b_balanced_vs_boosting(record_property, bench):
    fb, fbal = _column(bench("boosting"), "fm"), _column(bench("balanced"), "fm")
    ok = np.mean(fbal) <= np.mean(fb)
    report(record_property, "8b", ok, f"FM Balanced {np.mean(fbal):.4f} vs Boosting {np.mean(fb):.4f}")


def test_criterion_8c_corruption(record_property, bench):
    am, ah = _column(bench("mild"), "acc"), _column(bench("high"), "acc")
    ok = np.mean(am) >= np.mean(ah)
    report(record_property, "8c", ok, f"ACC Mild {np.mean(am):.4f} vs High {np.mean(ah):.4f}; benchmark time {bench.elapsed() / 60:.1f} min")


# -- 9, 10 -----------------------------------------------------------------------


def test_criterion_9_determinism(record_property, tmp_path):
    cfg = ExperimentConfig(name="determinism", seeds=[0])
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("manifest.json", "summary.json", "logs/accuracy.csv")
    )
    report(record_property, 9, same, f"manifest, summary and accuracy log byte-identical across two runs: {same}")


def test_criterion_10_f1(record_property):
    r = metrics.prf(np.array([[3, 0], [1, 4]]))
    f1 = float(r.f1[0])
    ok = r.precision[0] == 0.75 and r.recall[0] == 1.0 and abs(f1 - 0.857) <= 1e-3
    report(record_property, 10, ok, f"P={r.precision[0]:.2f} R={r.recall[0]:.2f} F1={f1:.4f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-rA"]))
