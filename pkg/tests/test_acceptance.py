"""Acceptance criteria 1-10. Each test records one line in ``conftest.ACCEPTANCE``,
printed at the end of the session whatever the outcome."""

import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

import conftest
from failpred import baselines as bl
from failpred import criteria, metrics
from failpred import experiment as exp
from failpred.datapipe import find_mnist
from gradcases import CASES, SEEDS, TOLERANCE
from oracles import (
    auroc_oracle, aupr_error_oracle, aupr_success_oracle, fpr95_oracle, random_outcomes, risk_coverage_oracle,
    trustscore_oracle,
)
from rank_invariance import invariance_gap

MNIST_DIR = Path(os.environ.get("FAILPRED_MNIST_DIR", "data/mnist"))
HAVE_MNIST = find_mnist(MNIST_DIR) is not None
SYNTH_SEEDS = range(5)


def record(number: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[number] = ("PASS" if ok else "FAIL", detail)
    assert ok, detail


def skip(number: int, reason: str) -> None:
    conftest.ACCEPTANCE[number] = ("SKIP", reason)
    pytest.skip(reason)


@dataclass
class Run:
    """One trained classifier plus its phase-1 and phase-2 confidence predictors."""
    seed: int
    folds: exp.Folds
    model: object
    p1: object
    p2: object

    def test_outcome(self):
        pred = self.model.predict(self.folds.test.features)
        return pred, pred.predicted != self.folds.test.labels

    def aupr_errors(self) -> tuple[float, float, float]:
        pred, err = self.test_outcome()
        x = self.folds.test.features
        return (metrics.aupr_error(pred.mcp, err), metrics.aupr_error(self.p1.predict_confidence(x), err),
                metrics.aupr_error(self.p2.predict_confidence(x), err))


def _train_runs(raw: dict, seeds, root: Path) -> list[Run]:
    runs = []
    for seed in seeds:
        cfg = exp.ExperimentConfig.from_dict(raw, seed=seed, output_dir=str(root / f"s{seed}"))
        folds = exp.prepare_data(cfg)
        model = exp.run_train(cfg, folds)
        p1, p2 = exp.fit_predictors(cfg, model, folds)
        runs.append(Run(seed, folds, model, p1, p2))
    return runs


@pytest.fixture(scope="module")
def synth_runs(tmp_path_factory):
    raw = {"schema_version": 1, "dataset": {"kind": "synth_blobs"}}
    return _train_runs(raw, SYNTH_SEEDS, tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    if not HAVE_MNIST:
        return None
    raw = {"schema_version": 1, "dataset": {"kind": "mnist", "path": str(MNIST_DIR)}}
    return _train_runs(raw, range(5), tmp_path_factory.mktemp("mnist"))


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for name, case in CASES.items():
        for seed in SEEDS:
            for part, e in case(seed).items():
                if e > worst:
                    worst, where = e, f"{name}/{part}/seed {seed}"
    elapsed = time.perf_counter() - t0
    record(1, worst < TOLERANCE and elapsed < 60,
           f"{len(CASES)} layers/losses x {len(SEEDS)} seeds, max rel error {worst:.2e} ({where}), {elapsed:.1f}s")


def test_criterion_02_metric_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        conf, err = random_outcomes(np.random.default_rng(seed))
        pairs = [(metrics.aupr_error(conf, err), aupr_error_oracle(conf, err)),
                 (metrics.aupr_success(conf, err), aupr_success_oracle(conf, err)),
                 (metrics.auroc(conf, err), auroc_oracle(conf, err)),
                 (metrics.fpr_at_95_tpr(conf, err), fpr95_oracle(conf, err))]
        got, want = metrics.risk_coverage(conf, err), risk_coverage_oracle(conf, err)
        if len(got) != len(want):
            worst = np.inf
        for g, (t, c, r) in zip(got, want):
            pairs += [(g.coverage, c), (g.selective_risk, r), (0.0, 0.0 if g.threshold == t else np.inf)]
        worst = max(worst, *(abs(a - b) for a, b in pairs))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-9 and elapsed < 60, f"100 instances, max |impl - oracle| {worst:.1e}, {elapsed:.1f}s")


def _all_models(synth_runs, mnist_runs):
    return list(synth_runs) + list(mnist_runs or [])


def test_criterion_03_guarantees(synth_runs, mnist_runs):
    violations, samples, overlap = 0, 0, []
    for run in _all_models(synth_runs, mnist_runs):
        for fold in (run.folds.train, run.folds.val, run.folds.test):
            r = criteria.guarantee_report(run.model.predict(fold.features).probs, fold.labels)
            violations += r.violations
            samples += r.n_samples
        overlap.append(criteria.guarantee_report(run.model.predict(run.folds.test.features).probs,
                                                 run.folds.test.labels).overlap_mass)
    n_models = len(_all_models(synth_runs, mnist_runs))
    record(3, violations == 0,
           f"{violations} violations over {samples} samples of {n_models} models; "
           f"test overlap mass {np.mean(overlap):.3f}")


def test_criterion_04_tcp_ratio_identity(synth_runs, mnist_runs):
    bad, n_ok, n_err = 0, 0, 0
    for run in _all_models(synth_runs, mnist_runs):
        for fold in (run.folds.train, run.folds.val, run.folds.test):
            probs = run.model.predict(fold.features).probs
            ratio = criteria.tcp_ratio(probs, fold.labels)
            correct = criteria.predicted_class(probs) == fold.labels
            bad += int(np.sum(ratio[correct] != 1.0))
            bad += int(np.sum((ratio[~correct] < 0.0) | (ratio[~correct] >= 1.0)))
            n_ok, n_err = n_ok + int(correct.sum()), n_err + int((~correct).sum())
    record(4, bad == 0, f"{bad} mismatches; ratio exactly 1 on {n_ok} correct, in [0,1) on {n_err} errors")


def test_criterion_05_mnist_reproduction(mnist_runs):
    if mnist_runs is None:
        skip(5, f"MNIST IDX files not found in {MNIST_DIR} (set FAILPRED_MNIST_DIR)")
    runs = mnist_runs[:3]
    acc = np.mean([1.0 - r.test_outcome()[1].mean() for r in runs])
    mcp, _, p2 = np.mean([r.aupr_errors() for r in runs], axis=0)
    ok = acc >= 0.96 and 0.25 <= mcp <= 0.50 and p2 - mcp >= 0.05
    record(5, ok, f"3 seeds: accuracy {100 * acc:.2f}%, AUPR-Error MCP {100 * mcp:.2f}, "
                  f"ConfidNet {100 * p2:.2f} (+{100 * (p2 - mcp):.2f})")


def _phase2_improved(predictor) -> bool:
    """True when some fine-tuning epoch beat the phase-2 starting holdout loss."""
    losses = [h["holdout_loss"] for h in predictor.history if h["phase"] == 2 and "holdout_loss" in h]
    return len(losses) > 1 and min(losses[1:]) < losses[0]


def test_criterion_06_finetuning(synth_runs, mnist_runs):
    parts, ok = [], True
    for name, runs in (("synth", synth_runs), ("MNIST", mnist_runs)):
        if runs is None:
            parts.append(f"{name}: data absent")
            continue
        scores = np.array([r.aupr_errors() for r in runs])
        gap = float(np.mean(scores[:, 2] - scores[:, 1]))
        ok &= gap >= 0.0
        kept = sum(_phase2_improved(r.p2) for r in runs)
        parts.append(f"{name}: phase2 - phase1 = {100 * gap:+.2f} points over {len(runs)} seeds "
                     f"(fine-tuned weights kept on {kept}, start restored on {len(runs) - kept})")
    detail = "; ".join(parts)
    if mnist_runs is None:
        # only half the criterion is measurable; report that instead of a pass
        conftest.ACCEPTANCE[6] = ("PART" if ok else "FAIL", detail)
        assert ok, detail
        pytest.skip(f"MNIST half of criterion 6 not evaluated: {detail}")
    record(6, ok, detail)


def test_criterion_07_entropy_symmetry(synth_runs):
    a = criteria.entropy_confidence([0.65, 0.35])
    b = criteria.entropy_confidence([0.35, 0.65])
    n_bins, n_higher, differ = 0, 0, True
    for run in synth_runs:
        pred, err = run.test_outcome()
        d = exp.entropy_diagnostic(pred.probs, err, run.p2.predict_confidence(run.folds.test.features))
        differ &= d["bins_strictly_different"]
        n_bins += len(d["bins"])
        n_higher += d["bins_correct_higher"]
    record(7, a == b and differ and n_bins > 0,
           f"entropy conf {a!r} both orders; {n_bins} mixed entropy bins over {len(synth_runs)} seeds, "
           f"ConfidNet means differ in all, correct higher in {n_higher}")


def test_criterion_08_trustscore():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        k, dim = int(rng.integers(2, 6)), int(rng.integers(1, 8))
        feats = rng.standard_normal((200, dim))
        labels = rng.integers(0, k, 200)
        labels[:k] = np.arange(k)
        queries = rng.standard_normal((50, dim))
        predicted = rng.integers(0, k, 50)
        want = trustscore_oracle([feats[labels == c] for c in range(k)], queries, predicted)
        got = bl.trustscore(bl.trustscore_fit(feats, labels, num_classes=k, backend="kdtree"), queries, predicted)
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))))
    pts = [np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([[10.0, 0.0], [10.0, 1.0]])]
    constructed = bl.trustscore(bl.TrustScoreIndex(pts), np.array([[2.0, 0.0]]), np.array([0]))[0]
    record(8, worst <= 1e-9 and constructed == 4.0,
           f"20 instances, max rel diff vs all-pairs {worst:.1e}; two-cluster case {float(constructed)!r}")


def test_criterion_09_rank_invariance():
    worst = max(invariance_gap(seed) for seed in range(50))
    record(9, worst <= 1e-12, f"50 trials, max metric change {worst:.1e}")


def _cli_run(config: Path, out: Path, threads: str) -> Path:
    env = {**os.environ, "OMP_NUM_THREADS": threads, "OPENBLAS_NUM_THREADS": threads, "MKL_NUM_THREADS": threads}
    res = subprocess.run([sys.executable, "-m", "failpred.cli", "run", "--config", str(config), "--out", str(out)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return out


def test_criterion_10_determinism(tmp_path):
    config = tmp_path / "synth.json"
    config.write_text(json.dumps({"schema_version": 1, "dataset": {"kind": "synth_blobs"}, "seed": 3}))
    a = _cli_run(config, tmp_path / "a", "1")
    b = _cli_run(config, tmp_path / "b", "4")
    ra = exp.strip_wall_clock(json.loads((a / "report.json").read_text()))
    rb = exp.strip_wall_clock(json.loads((b / "report.json").read_text()))
    bytes_a = json.dumps(ra, sort_keys=True).encode()
    same = bytes_a == json.dumps(rb, sort_keys=True).encode()
    same &= (a / "scores.csv").read_bytes() == (b / "scores.csv").read_bytes()
    same &= (a / "classifier.bin").read_bytes() == (b / "classifier.bin").read_bytes()
    record(10, same, f"two subprocess runs (1 vs 4 BLAS threads): report ({len(bytes_a)} bytes sans wall clock), "
                     f"scores.csv and checkpoints {'identical' if same else 'DIFFER'}")
