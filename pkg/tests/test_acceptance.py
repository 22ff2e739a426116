"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints as
``criterion N: PASS|FAIL  detail``. Criteria 6 to 10 train real models and
take minutes each on a single core.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from scriptor_id import nn
from scriptor_id.aggregation import aggregate, aggregation_backward
from scriptor_id.checkpoint import load_checkpoint
from scriptor_id.cli import main
from scriptor_id.corpus import load_patch_sets
from scriptor_id.models import NetworkSpec, build_network, forward_local
from scriptor_id.preprocess import otsu_threshold
from scriptor_id.sampling import make_epoch_plan, next_batches
from scriptor_id.synthdata import SynthCorpusSpec, render_corpus_arrays
from scriptor_id.train import Dataset, TrainingConfig, evaluate_multi_tuple, evaluate_topk, train

H = 1e-5

# shared settings of the scaled synthetic run
RUN_CONFIG = """\
[paths]
corpus = corpus
checkpoint = model.ckpt

[synth]
writers = 10
patches_per_writer = 100
seed = 0

[network]
variant = sub_region
filters = 8, 16, 32, 64

[train]
aggregation = AA
n = 5
p = 5
learning_rate = 0.01
momentum = 0.9
patience = 5
max_epochs = 20
seed = 1

[eval]
n = 5
trials = 20
k_list = 1, 5, 10
seed = 7
experiment = synthetic
"""
RUN_TRAINING = TrainingConfig(spec=NetworkSpec.sub_region((8, 16, 32, 64)), n=5, p=5, patience=5,
                              max_epochs=20, seed=1)


def verdict(record_property, number, ok, detail):
    record_property("criterion", number)
    record_property("detail", detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def run_pipeline(root: Path) -> float:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(RUN_CONFIG)
    t0 = time.perf_counter()
    for command in ("synth", "train", "eval"):
        assert main([command, "--config", str(cfg)]) == 0, command
    return time.perf_counter() - t0


def mean_top1(results_csv: Path) -> float:
    rows = [r for r in csv.DictReader(open(results_csv)) if r["trial"] == "mean"]
    return float(rows[0]["top1"])


# --- fast criteria -------------------------------------------------------------


def test_criterion_1_shape_fidelity(record_property):
    t0 = time.perf_counter()
    x = np.random.default_rng(0).random((1, 64, 64))
    sub = forward_local(build_network(NetworkSpec.sub_region(), 0), x)
    char = forward_local(build_network(NetworkSpec.char_level(), 0), x)
    elapsed = time.perf_counter() - t0
    shapes = (sub.values.shape, char.values.shape)
    ok = shapes == ((4, 4, 1024), (1, 1, 1024)) and elapsed < 30
    verdict(record_property, 1, ok, f"sub_region {shapes[0]}, char_level {shapes[1]}, {elapsed:.1f}s")


def _layer_errors(rng, forward, backward, x, params):
    out, cache = forward(x, *params)
    cot = rng.normal(size=out.shape)
    grads = backward(cache, cot)

    def at(i, v):
        args = [x, *params]
        args[i] = v
        return float((forward(*args)[0] * cot).sum())

    errs = [nn.relative_error(grads.d_input, nn.numeric_gradient(lambda v: at(0, v), x, H))]
    for j, (p, g) in enumerate(zip(params, grads.d_params), start=1):
        errs.append(nn.relative_error(g, nn.numeric_gradient(lambda v, j=j: at(j, v), p, H)))
    return max(errs)


def _spread(rng, shape):
    # distinct values far apart relative to h, so argmax and top-K sets stay put
    return (rng.permutation(int(np.prod(shape))) * 0.05 + rng.normal(0, 1e-3, int(np.prod(shape)))).reshape(shape)


def test_criterion_2_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst_layer, worst_agg = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        stride, pad = [(1, 2), (1, 0), (2, 1)][seed % 3]
        worst_layer = max(
            worst_layer,
            _layer_errors(rng, lambda a, w, b: nn.conv2d(a, w, b, stride, pad), nn.conv2d_backward,
                          rng.normal(size=(2, 6, 6)), [rng.normal(size=(3, 2, 5, 5)), rng.normal(size=3)]),
            _layer_errors(rng, nn.maxpool2d, nn.maxpool2d_backward, _spread(rng, (2, 5, 5)), []),
            _layer_errors(rng, nn.relu, nn.relu_backward, _spread(rng, (2, 4, 4)) - 0.8, []),
            _layer_errors(rng, nn.linear, nn.linear_backward, rng.normal(size=6),
                          [rng.normal(size=(4, 6)), rng.normal(size=4)]),
        )
        logits, label = rng.normal(size=5), seed % 5
        _, d = nn.softmax_cross_entropy(logits, label)
        num = nn.numeric_gradient(lambda v: nn.softmax_cross_entropy(v, label)[0], logits, H)
        worst_layer = max(worst_layer, nn.relative_error(d, num))
        for method in ("AA", "MA", "KMA"):
            x = _spread(rng, (3, 2, 2, 4))
            k = 1 + seed % 12 if method == "KMA" else None
            g, ctx = aggregate(x, method, k)
            cot = rng.normal(size=g.values.shape)
            num = nn.numeric_gradient(lambda v: float(aggregate(v, method, k)[0].values @ cot), x, H)
            worst_agg = max(worst_agg, nn.relative_error(aggregation_backward(ctx, cot), num))
    elapsed = time.perf_counter() - t0
    ok = worst_layer <= 1e-4 and worst_agg <= 1e-6 and elapsed < 60
    verdict(record_property, 2, ok,
            f"worst layer rel err {worst_layer:.2e}, worst aggregation {worst_agg:.2e}, {elapsed:.1f}s")


def test_criterion_3_aggregation_algebra(record_property):
    rng = np.random.default_rng(3)
    endpoint_gap, failures = 0.0, []
    for case in range(100):
        n, side, depth = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 9)
        x = rng.normal(size=(n, side, side, depth))
        if case % 3 == 0:
            x = np.round(x)  # plenty of ties
        n_pos = n * side * side
        aa, ma = aggregate(x, "AA")[0].values, aggregate(x, "MA")[0].values
        endpoint_gap = max(endpoint_gap,
                           np.abs(aggregate(x, "KMA", 1)[0].values - ma).max(),
                           np.abs(aggregate(x, "KMA", n_pos)[0].values - aa).max())
        prev = ma
        for k in range(1, n_pos + 1):
            cur = aggregate(x, "KMA", k)[0].values
            if not (np.all(aa <= cur) and np.all(cur <= ma) and np.all(cur <= prev)):
                failures.append(f"case {case} sandwich/monotone at K={k}")
            prev = cur
        perm = rng.permutation(n)
        for method in ("AA", "MA", "KMA"):
            k = max(1, n_pos // 2)
            if aggregate(x, method, k)[0].values.tobytes() != aggregate(x[perm], method, k)[0].values.tobytes():
                failures.append(f"case {case} {method} not permutation invariant")
    ok = endpoint_gap <= 1e-12 and not failures
    verdict(record_property, 3, ok, f"endpoint gap {endpoint_gap:.1e}, {len(failures)} violations in 100 tuples")


def _otsu_brute(img):
    from fractions import Fraction

    vals = np.asarray(img).ravel().astype(int)
    total = len(vals)
    best, best_t = Fraction(0), 0
    for t in range(256):
        lo, hi = vals[vals < t], vals[vals >= t]
        if len(lo) == 0 or len(hi) == 0:
            continue
        w0, w1 = Fraction(len(lo), total), Fraction(len(hi), total)
        diff = Fraction(int(lo.sum()), len(lo)) - Fraction(int(hi.sum()), len(hi))
        score = w0 * w1 * diff * diff
        if score > best:
            best, best_t = score, t
    return best_t


def test_criterion_4_otsu_oracle(record_property):
    rng = np.random.default_rng(4)
    images = [rng.integers(0, 256, size=(16, 16), dtype=np.uint8) for _ in range(100)]
    mismatches = sum(otsu_threshold(img) != _otsu_brute(img) for img in images)
    uniform = otsu_threshold(np.full((16, 16), 90, dtype=np.uint8))
    tie = otsu_threshold(np.array([[0, 0, 0, 255, 255]], dtype=np.uint8))
    ok = mismatches == 0 and uniform == 0 and tie == 1
    verdict(record_property, 4, ok, f"{mismatches}/100 mismatches, uniform t={uniform}, two-level tie t={tie}")


def test_criterion_5_epoch_plan_coverage(record_property):
    rng = np.random.default_rng(5)
    bad = []
    for case in range(50):
        n_s = int(rng.integers(1, 120))
        n = int(rng.integers(1, n_s + 1))
        p = int(rng.integers(1, 25))
        m = n_s // n
        plan = make_epoch_plan({"a": list(range(n_s)), "b": list(range(n_s))}, n, p, case)
        tuples = 0
        for it in range(p):
            batches = [b for b in next_batches(plan, it) if b.writer == "a"]
            ids = [i for b in batches for i in b.patch_ids]
            tuples += len(batches)
            if len(ids) != len(set(ids)) or len(ids) != m * n:
                bad.append((n_s, n, p, it))
        if tuples != m * p:
            bad.append((n_s, n, p, "total"))
    verdict(record_property, 5, not bad, f"50 settings, {len(bad)} violations")


# --- scaled synthetic runs -----------------------------------------------------


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run_a")
    return root, run_pipeline(root)


@pytest.fixture(scope="module")
def run_corpus(first_run):
    root, _ = first_run
    return Dataset(*(load_patch_sets(root / "corpus" / s / "manifest.tsv") for s in ("train", "val", "test")))


@pytest.mark.slow
def test_criterion_6_synthetic_end_to_end(first_run, record_property):
    root, elapsed = first_run
    top1 = mean_top1(root / "results.csv")
    ok = top1 >= 95.0 and elapsed <= 15 * 60
    verdict(record_property, 6, ok, f"mean top-1 {top1:.2f}% over 20 trials, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_tuple_size_trend(run_corpus, record_property):
    seeds = range(5)
    top1 = {}
    for n in (1, 2, 10):
        cfg = TrainingConfig(**{**RUN_TRAINING.__dict__, "n": n})
        model, _ = train(cfg, run_corpus.train, run_corpus.val)
        top1[n] = [evaluate_topk(model, run_corpus.test, n, (1,), 20, seed=100 + s).mean(1) for s in seeds]
    means = {n: float(np.mean(v)) for n, v in top1.items()}
    wins = sum(a >= b for a, b in zip(top1[10], top1[2]))
    strict = sum(a > b for a, b in zip(top1[10], top1[2]))
    ok = means[10] >= means[1] - 1.0 and wins >= 4
    verdict(record_property, 7, ok,
            f"mean top-1 n=1 {means[1]:.2f}, n=2 {means[2]:.2f}, n=10 {means[10]:.2f}; "
            f"n=10 >= n=2 in {wins}/5 runs ({strict}/5 strictly greater)")


@pytest.mark.slow
def test_criterion_8_multi_tuple_fusion(first_run, run_corpus, record_property):
    root, _ = first_run
    model = load_checkpoint(root / "model.ckpt")
    single = evaluate_topk(model, run_corpus.test, 5, (1,), 20, seed=8).mean(1)
    fused = evaluate_multi_tuple(model, run_corpus.test, 5, t=5, seed=8, k_list=(1,), trials=20).report.mean(1)
    verdict(record_property, 8, fused >= single - 0.5, f"t=5 fused {fused:.2f}% vs single {single:.2f}%")


@pytest.mark.slow
def test_criterion_9_writer_count_trend(record_property):
    arrays = render_corpus_arrays(SynthCorpusSpec(num_writers=20, patches_per_writer=100, seed=0))
    full = Dataset(arrays["train"], arrays["val"], arrays["test"])
    top1 = {}
    for writers in (5, 20):
        data = full.subset(writers)
        model, _ = train(RUN_TRAINING, data.train, data.val)
        top1[writers] = evaluate_topk(model, data.test, 5, (1,), 20, seed=9).mean(1)
    ok = top1[20] <= top1[5] + 2.0
    verdict(record_property, 9, ok, f"mean top-1 5 writers {top1[5]:.2f}%, 20 writers {top1[20]:.2f}%")


@pytest.mark.slow
def test_criterion_10_determinism(first_run, tmp_path, record_property):
    root, _ = first_run
    run_pipeline(tmp_path / "run_b")
    a = (root / "results.csv").read_bytes()
    b = (tmp_path / "run_b" / "results.csv").read_bytes()
    same_ckpt = (root / "model.ckpt").read_bytes() == (tmp_path / "run_b" / "model.ckpt").read_bytes()
    verdict(record_property, 10, a == b, f"results CSV identical: {a == b}, checkpoint identical: {same_ckpt}")
