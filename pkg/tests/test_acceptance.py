"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

The learning criteria (6, 7, 10) train the full-size model on a 40-subject
synthetic corpus and take about an hour on one CPU core. Their training
schedule is fixed below and recorded in the notes that accompany the repo.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from pdhybrid import autodiff as ad
from pdhybrid.autodiff import Tensor
from pdhybrid.cli import main, write_ablation_outputs
from pdhybrid.dataio import build_manifest, encode_recording, import_csv, write_manifest
from pdhybrid.evaluation import check_plan, make_kfold, make_loocv, report_from_predictions
from pdhybrid.gradcheck import MODEL_RTOL, run_all
from pdhybrid.model import HybridConfig, HybridModel
from pdhybrid.preprocess import (BIOSEMI32, PreprocessConfig, Recording, SegmentBatch, bandpass, fastica,
                                 preprocess_recording, resample)
from pdhybrid.synth import SynthSpec, synth_recordings
from pdhybrid.training import ABLATION_LADDER, TrainConfig, run_ablation, run_crossval

README = Path(__file__).resolve().parents[1] / "README.md"

# Training schedule for the synthetic-corpus criteria: float32, Adam at 1e-3,
# two epochs per 10-fold split and one per leave-one-subject-out split.
KFOLD_EPOCHS, LOOCV_EPOCHS = 2, 1
SEED = 7
TIME_BUDGET_S = 30 * 60


def schedule(epochs: int) -> TrainConfig:
    return TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=epochs, early_stop_patience=epochs,
                       seed=SEED, dtype="float32")


def verdict(log, number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


def corpus_of(spec: SynthSpec) -> SegmentBatch:
    batch = SegmentBatch.concat([preprocess_recording(r, PreprocessConfig()) for r in synth_recordings(spec)])
    batch.data = batch.data.astype(np.float32)
    return batch


# ---------------------------------------------------------------- shared expensive runs

@pytest.fixture(scope="module")
def corpus():
    return corpus_of(SynthSpec(n_pd=20, n_hc=20, duration_s=60.0, seed=SEED, separation=2.0))


@pytest.fixture(scope="module")
def kfold_run(corpus):
    plan = make_kfold(corpus, 10, seed=SEED)
    t0 = time.perf_counter()
    res = run_crossval(HybridConfig(), schedule(KFOLD_EPOCHS), plan, corpus, keep_models=True)
    return plan, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def loocv_run(corpus):
    plan = make_loocv(corpus, seed=SEED)
    t0 = time.perf_counter()
    res = run_crossval(HybridConfig(), schedule(LOOCV_EPOCHS), plan, corpus, keep_models=False)
    return plan, res, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_criterion_01_reproduction_path(tmp_path, acceptance_log):
    """Clinical data are not bundled; the CSV -> preprocess -> crossval route must run end to end."""
    rng = np.random.default_rng(0)
    files = []
    for i in range(6):
        label = "PD" if i < 3 else "HC"
        vals = rng.standard_normal((4 * 500, 32)) * 20
        p = tmp_path / f"s{i}.csv"
        np.savetxt(p, vals, delimiter=",", header=",".join(BIOSEMI32), comments="", fmt="%.6f")
        rec = import_csv(p, 500.0, f"s{i:02d}", label, "off" if label == "PD" else "n/a")
        blob = encode_recording(rec)
        (tmp_path / f"s{i}.raw").write_bytes(blob)
        files.append((f"s{i}.raw", blob, rec))
    write_manifest(build_manifest(tmp_path, files, "biosemi32"))
    codes = [main(["preprocess", "--in", str(tmp_path / "manifest.json"), "--out", str(tmp_path / "seg")]),
             main(["crossval", "--data", str(tmp_path / "seg"), "--set", "max_epochs=1", "--set", "dtype=float32",
                   "--out", str(tmp_path / "cv")])]
    rep = json.loads((tmp_path / "cv" / "report.json").read_text())
    text = README.read_text() if README.exists() else ""
    documented = all(k in text for k in ("preprocess", "crossval", "import_csv"))
    ok = codes == [0, 0] and rep["segment"]["n_items"] == 12 and documented
    verdict(acceptance_log, 1, "reproduction path", ok,
            f"exit codes {codes}, {rep['segment']['n_items']} pooled segments, README documents route: {documented}")


# ---------------------------------------------------------------- 2

def test_criterion_02_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    model = results[-1]
    ok = not failed and elapsed < 300 and model.n_checked >= 25 and MODEL_RTOL == 1e-3
    verdict(acceptance_log, 2, "gradient suite", ok,
            f"{len(results) - len(failed)}/{len(results)} checks, model entries {model.n_checked}, "
            f"{elapsed:.0f} s (<300); failed: {failed or 'none'}")


# ---------------------------------------------------------------- 3

def test_criterion_03_shape_contract(acceptance_log):
    model = HybridModel.init(HybridConfig(), seed=0)
    rng = np.random.default_rng(3)
    problems, worst = [], 0.0
    for b in (1, 16):
        trace = {}
        out = model.forward(rng.standard_normal((b, 32, 512)), trace=trace)
        want = {"input": (b, 32, 512), "encoded": (b, 512, 16), "states": (b, 16, 250), "head_input": (b, 250)}
        trace["input"] = (b, 32, 512)
        problems += [f"{k}={trace[k]}" for k, v in want.items() if trace[k] != v]
        if out.shape != (b,):
            problems.append(f"output={out.shape}")
        worst = max(worst, float(np.max(np.abs(trace["attention_weights"].data.sum(axis=1) - 1))))
    ok = not problems and worst <= 1e-12
    verdict(acceptance_log, 3, "shape contract", ok,
            f"B in {{1,16}}, mismatches {problems or 'none'}, max |sum(attention)-1| = {worst:.1e}")


# ---------------------------------------------------------------- 4

def test_criterion_04_loss(acceptance_log):
    v = float(ad.bce_loss(Tensor(np.array([0.5, 0.5])), Tensor(np.array([1.0, 0.0]))).data)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 64))
        p, y = rng.uniform(0.01, 0.99, n), rng.integers(0, 2, n).astype(float)
        direct = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / n
        worst = max(worst, abs(float(ad.bce_loss(Tensor(p), Tensor(y)).data) - direct))
    ok = abs(v - math.log(2)) <= 1e-12 and worst <= 1e-12
    verdict(acceptance_log, 4, "loss correctness", ok,
            f"|bce - ln2| = {abs(v - math.log(2)):.1e}, max direct-sum gap over 100 batches = {worst:.1e}")


# ---------------------------------------------------------------- 5

def _rec(x, fs):
    return Recording("s", "PD", "off", fs, BIOSEMI32, np.tile(x, (32, 1)))


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def test_criterion_05_signal_suite(acceptance_log):
    t0 = time.perf_counter()
    t256 = np.arange(2560) / 256
    dc = _rms(bandpass(_rec(np.full(2560, 3.0), 256.0)).samples[0]) / 3.0
    hf = _rms(bandpass(_rec(np.sin(2 * np.pi * 100 * t256), 256.0)).samples[0]) / _rms(np.sin(2 * np.pi * 100 * t256))
    ten = np.sin(2 * np.pi * 10 * t256)
    pb = _rms(bandpass(_rec(ten, 256.0)).samples[0]) / _rms(ten)
    t500 = np.arange(5000) / 500
    rs = resample(_rec(np.sin(2 * np.pi * 10 * t500), 500.0)).samples[0]
    corr = float(np.corrcoef(rs, np.sin(2 * np.pi * 10 * np.arange(2560) / 256))[0, 1])

    t = np.linspace(0, 8, 5000)
    s = np.vstack([np.sin(2 * np.pi * 1.3 * t), np.sign(np.sin(2 * np.pi * 0.7 * t + 0.4))])
    s = (s - s.mean(axis=1, keepdims=True)) / s.std(axis=1, keepdims=True)
    x = np.array([[1.0, 0.6], [0.4, 1.2]]) @ s
    d1, d2 = fastica(x, n_components=2, seed=1), fastica(x, n_components=2, seed=1)
    c = np.abs(np.corrcoef(np.vstack([d1.sources, s]))[:2, 2:])
    ica = max(min(c[0, 0], c[1, 1]), min(c[0, 1], c[1, 0]))
    rerun = bandpass(_rec(ten, 256.0)).samples
    deterministic = np.array_equal(d1.sources, d2.sources) and np.array_equal(rerun, bandpass(_rec(ten, 256.0)).samples)
    elapsed = time.perf_counter() - t0
    ok = dc < 0.1 and hf < 0.1 and abs(pb - 1) <= 0.05 and corr >= 0.999 and ica >= 0.95 \
        and deterministic and elapsed < 120
    verdict(acceptance_log, 5, "signal suite", ok,
            f"DC {dc:.1e}, 100 Hz {hf:.3f} (<0.1), 10 Hz gain {pb:.4f} (+-5%), resample corr {corr:.5f}, "
            f"ICA min corr {ica:.4f}, deterministic {deterministic}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 6

def test_criterion_06_end_to_end_learning(corpus, kfold_run, loocv_run, acceptance_log):
    _, kres, kt = kfold_run
    _, lres, lt = loocv_run
    null = corpus_of(SynthSpec(n_pd=20, n_hc=20, duration_s=60.0, seed=SEED, separation=1.0))
    nres = run_crossval(HybridConfig(), schedule(KFOLD_EPOCHS), make_kfold(null, 10, seed=SEED), null,
                        keep_models=False)
    seg = kres.segment.metrics["accuracy"]
    subj = lres.subject.metrics["accuracy"]
    chance = nres.segment.metrics["accuracy"]
    ok = seg >= 90 and subj >= 85 and kt + lt < TIME_BUDGET_S and 40 <= chance <= 60
    verdict(acceptance_log, 6, "end-to-end learning", ok,
            f"kfold10 segment acc {seg:.2f}% (>=90), loocv subject acc {subj:.2f}% (>=85), "
            f"training {kt + lt:.0f} s (<{TIME_BUDGET_S}), separation 1.0 acc {chance:.2f}% (in [40,60])")


# ---------------------------------------------------------------- 7

def test_criterion_07_missing_channel(kfold_run, acceptance_log):
    _, res, _ = kfold_run
    holed = corpus_of(SynthSpec(n_pd=20, n_hc=20, duration_s=60.0, seed=SEED, separation=2.0,
                                omit_channels=("Pz",)))
    pz = BIOSEMI32.index("Pz")
    zero_filled = bool(np.all(holed.data[:, pz, :] == 0))
    probs = np.full(len(holed), np.nan)
    for r in res.folds:
        probs[r.test_index] = r.model.predict_proba(holed.data[r.test_index])
    rep = report_from_predictions("segment", holed.labels, probs, holed.subject_ids)
    base, degraded = res.segment.metrics["accuracy"], rep.metrics["accuracy"]
    ok = zero_filled and base - degraded <= 15
    verdict(acceptance_log, 7, "missing-channel robustness", ok,
            f"Pz zero-filled {zero_filled}, accuracy {base:.2f}% -> {degraded:.2f}% "
            f"(drop {base - degraded:.2f} <= 15)")


# ---------------------------------------------------------------- 8

def test_criterion_08_protocol_hygiene(corpus, kfold_run, loocv_run, acceptance_log):
    kplan, kres, _ = kfold_run
    lplan, _, _ = loocv_run
    plans = [kplan, lplan]
    rng = np.random.default_rng(8)
    for seed in range(50):
        sizes = rng.integers(1, 6, size=int(rng.integers(3, 25)))
        sids = np.repeat([f"s{i:03d}" for i in range(len(sizes))], sizes)
        labels = np.repeat(np.arange(len(sizes)) % 2, sizes)
        b = SegmentBatch(np.zeros((len(sids), 32, 512), np.float32), labels, sids, ["n/a"] * len(sids))
        plans.append((make_loocv(b, seed), b))
        if len(b) >= 10:
            plans.append((make_kfold(b, 10, seed), b))
    scanned = 0
    for item in plans:
        plan, b = (item, corpus) if not isinstance(item, tuple) else item
        check_plan(plan, b)
        if plan.strategy == "loocv":
            for i in range(len(plan.folds)):
                tr, va, te = plan.indices(b, i)
                assert not set(b.subject_ids[te]) & set(b.subject_ids[np.concatenate([tr, va])])
        scanned += 1
    counts = np.zeros(len(corpus), dtype=int)
    for r in kres.folds:
        counts[r.test_index] += 1
    once = bool(np.all(counts == 1))
    verdict(acceptance_log, 8, "protocol hygiene", once,
            f"{scanned} plans scanned without leakage, kfold10 pooled coverage exactly once: {once}")


# ---------------------------------------------------------------- 9

def test_criterion_09_reproducibility(tmp_path, acceptance_log):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_pd = 3\nn_hc = 3\nduration_s = 4.0\nseed = 9\n")
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "raw")])
    main(["preprocess", "--in", str(tmp_path / "raw" / "manifest.json"), "--out", str(tmp_path / "seg")])
    args = ["crossval", "--data", str(tmp_path / "seg"), "--set", "max_epochs=2", "--set", "seed=11"]
    codes = [main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = codes == [0, 0] and not differing and Path("report.json") in files and Path("best.ckpt") in files
    verdict(acceptance_log, 9, "reproducibility", ok,
            f"{len(files)} output files compared (report, checkpoint, folds, curves), differing: {differing or 'none'}")


# ---------------------------------------------------------------- 10

def test_criterion_10_ablation(corpus, kfold_run, tmp_path, acceptance_log):
    plan, res, _ = kfold_run
    full = "VGG13-BiGRU-Attn"
    rows = run_ablation(corpus, plan, schedule(KFOLD_EPOCHS), HybridConfig(), precomputed={full: res})
    cfg = {"model": HybridConfig(), "train": schedule(KFOLD_EPOCHS), "split_seed": SEED}
    write_ablation_outputs(rows, plan, cfg, {"n_subjects": 40}, tmp_path)
    lines = (tmp_path / "ablation.csv").read_text().strip().splitlines()
    valid = len(lines) == 6 and [r["architecture"] for r in rows] == [n for n, _ in ABLATION_LADDER] and all(
        r[k] is not None and 0 <= r[k] <= 100 for r in rows
        for k in ("accuracy", "sensitivity", "specificity", "precision", "recall", "f1"))
    acc = {r["architecture"]: r["accuracy"] for r in rows}
    best = max(acc.values())
    ok = valid and best - acc[full] <= 2
    verdict(acceptance_log, 10, "ablation ladder", ok,
            "; ".join(f"{k} {v:.2f}%" for k, v in acc.items()) + f"; gap to best {best - acc[full]:.2f} (<=2)")
