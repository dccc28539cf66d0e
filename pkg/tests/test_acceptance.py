"""End-to-end acceptance checks, one test per criterion.

The trained separator, the fine-tuned separator and both classifiers are
cached under ``.acceptance_cache/`` keyed by a hash of the package sources
and the configuration below. Training wall clock is recorded at training
time so the time budget stays honest on a cache hit. Set
``ORPIT_ACCEPTANCE_RETRAIN=1`` to ignore the cache.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import orpit
from orpit.autodiff import Tensor
from orpit.dominant import dominant_eval
from orpit.gradcheck import check_gradients
from orpit.loss import or_pit_loss, upit_loss_n2
from orpit.metrics import best_permutation_score, ibm_separate, si_snr
from orpit.recursion import oracle_stems_batch
from orpit.separator import (SeparatorConfig, SeparatorParams, forward, init_params, load_checkpoint,
                             run_batch, save_checkpoint)
from orpit.stopper import (build_stop_training_set, evaluate_binary_counting, evaluate_count_baseline,
                           load_classifier, save_classifier, train_binary, train_count_baseline)
from orpit.synth import DatasetConfig, generate_samples, random_mixture
from orpit.training import TrainConfig, fine_tune_recursive, train_orpit, validation_sisnri
from orpit.wavio import Waveform, dequantize, quantize, read_wav, write_wav

from oracles import brute_force_orpit
from test_autodiff import _primitive_cases

MODEL = SeparatorConfig(n_basis=48, mask_channels=48)
TRAIN = TrainConfig(epochs=30, seed=42, model=MODEL)
TRAIN_DATA = DatasetConfig(counts={2: 1000, 3: 1000}, seed=42)
HELD_OUT = DatasetConfig(counts={2: 100, 3: 100, 4: 100}, seed=43, split="test")
FINE_TUNE = TrainConfig(epochs=5, seed=42, n_ratio={3: 1.0}, model=MODEL)
COUNT_TRAIN = DatasetConfig(counts={1: 400, 2: 400, 3: 400}, seed=5)
COUNT_EVAL = DatasetConfig(counts={1: 200, 2: 200, 3: 200}, seed=6, split="test")
BUDGET_S = 20 * 60

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".acceptance_cache"


def verdict(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def samples(cfg):
    return [s for _, _, s in generate_samples(cfg)]


def by_n(data, n):
    return [s for s in data if s.n == n]


def cache_key():
    h = hashlib.sha256()
    for p in sorted(Path(orpit.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(repr((TRAIN, TRAIN_DATA, FINE_TUNE, COUNT_TRAIN)).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="module")
def cache_dir():
    d = CACHE / cache_key()
    if os.environ.get("ORPIT_ACCEPTANCE_RETRAIN"):
        for f in d.glob("*"):
            f.unlink()
    d.mkdir(parents=True, exist_ok=True)
    return d


def cached(path: Path, build, save, load):
    """Load ``path`` or build, save and time the artifact; returns (value, build seconds)."""
    meta = path.with_suffix(".json")
    if path.exists() and meta.exists():
        return load(path), json.loads(meta.read_text())["seconds"]
    t0 = time.perf_counter()
    value = build()
    seconds = time.perf_counter() - t0
    save(value, path)
    meta.write_text(json.dumps({"seconds": seconds}))
    return value, seconds


@pytest.fixture(scope="module")
def held_out():
    return samples(HELD_OUT)


@pytest.fixture(scope="module")
def separator(cache_dir):
    return cached(cache_dir / "separator.orp",
                  lambda: train_orpit(samples(TRAIN_DATA), TRAIN)[0],
                  save_checkpoint, load_checkpoint)


# ---------------------------------------------------------------------------
# 1-4: exact and numerical properties
# ---------------------------------------------------------------------------

def random_instance(rng, n, t=64):
    return rng.standard_normal(t), rng.standard_normal(t), list(rng.standard_normal((n, t)))


def test_c01_orpit_brute_force(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        n = (2, 3, 4)[k % 3]
        one, rest, srcs = random_instance(rng, n)
        if k % 50 == 0:
            rest = one.copy()  # duplicate channels force ties across splits
            srcs = [srcs[0]] * n
        loss, idx, _ = or_pit_loss(Tensor(one), Tensor(rest), srcs)
        ref_loss, ref_idx = brute_force_orpit(one, rest, srcs)
        mismatches += not (float(loss.data) == ref_loss and idx == ref_idx)
    elapsed = time.perf_counter() - t0
    verdict(capsys, "C1 OR-PIT vs brute force", mismatches == 0 and elapsed < 10,
            f"{mismatches} mismatches in 1000, {elapsed:.2f} s (< 10 s)")


def test_c02_upit_equivalence(capsys):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        a, b, (s1, s2) = random_instance(rng, 2)
        orp = float(or_pit_loss(Tensor(a), Tensor(b), [s1, s2])[0].data)
        upit = float(upit_loss_n2(Tensor(a), Tensor(b), s1, s2).data)
        mismatches += orp != upit
    verdict(capsys, "C2 uPIT equivalence at N=2", mismatches == 0, f"{mismatches} mismatches in 1000")


def composed_case(rng):
    cfg = SeparatorConfig(n_basis=6, enc_kernel=4, enc_stride=2, mask_layers=2, mask_channels=5,
                          dilations=(1, 2), mask_kernel=3, segment_len=64, seed=3)
    p = init_params(cfg, dtype=np.float64)
    names = list(p.tensors)
    arrays = [p.tensors[k].data + 0.05 * rng.standard_normal(p.tensors[k].shape) for k in names]
    x = rng.standard_normal((1, 30))
    srcs = list(rng.standard_normal((3, 30)))

    def fn(*arrs):
        params = SeparatorParams(cfg, dict(zip(names, arrs)))
        one, rest = forward(params, Tensor(x.astype(arrs[0].data.dtype)))
        return or_pit_loss(one, rest, srcs)[0]
    return fn, arrays


def test_c03_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst32, worst64, failed = 0.0, 0.0, []
    cases = [(name, fn, arrays) for name, fn, arrays in _primitive_cases(np.random.default_rng(3))]
    cases.append(("or_pit_loss∘forward", *composed_case(np.random.default_rng(4))))
    for name, fn, arrays in cases:
        e64 = max(check_gradients(fn, arrays, eps=1e-6))
        if name == "or_pit_loss∘forward":
            e32 = max(check_gradients(fn, arrays, eps=1e-6, dtype=np.float32, oracle_dtype=np.float64))
        else:
            e32 = max(check_gradients(fn, arrays, eps=1e-3, dtype=np.float32))
        worst32, worst64 = max(worst32, e32), max(worst64, e64)
        if not (e32 < 1e-3 and e64 < 1e-6):
            failed.append(name)
    elapsed = time.perf_counter() - t0
    verdict(capsys, "C3 gradient suite", not failed and elapsed < 60,
            f"{len(cases)} checks, worst 32-bit {worst32:.1e} (< 1e-3), worst 64-bit {worst64:.1e} (< 1e-6), "
            f"{elapsed:.1f} s (< 60 s){', failed: ' + ', '.join(failed) if failed else ''}")


def test_c04_si_snr_identities(capsys):
    rng = np.random.default_rng(5)
    est, ref = rng.standard_normal(64), rng.standard_normal(64)
    base = si_snr(est, ref)
    scale_ok = all(si_snr(a * est, ref) == base == si_snr(est, b * ref)
                   for a, b in [(2.0, 4.0), (0.5, 0.25), (8.0, 16.0)])
    # on a dyadic grid the shift and the mean removal round nothing, so equality is exact
    est_d, ref_d = np.round(est * 64) / 64, np.round(ref * 64) / 64
    base_d = si_snr(est_d, ref_d)
    shift_ok = si_snr(est_d + 3.0, ref_d) == base_d == si_snr(est_d, ref_d - 7.0)
    hand = si_snr([1.0, 0.0, 0.0], [1.0, -1.0, 0.0])
    hand_ok = abs(hand - 10 * np.log10(3)) < 1e-9
    verdict(capsys, "C4 SI-SNR identities", scale_ok and shift_ok and hand_ok,
            f"scale exact {scale_ok}, mean shift exact {shift_ok}, hand value {hand:.12f} dB")


# ---------------------------------------------------------------------------
# 5-10: trained-model behaviour
# ---------------------------------------------------------------------------

def ibm_sisnri(data):
    out = []
    for s in data:
        refs = [r.samples for r in s.sources]
        ests = [w.samples for w in ibm_separate(s.mixture, refs)]
        _, mean_est = best_permutation_score(ests, refs)
        out.append(mean_est - np.mean([si_snr(s.mixture.samples, r) for r in refs]))
    return float(np.mean(out))


def test_c05_toy_separation(capsys, separator, held_out):
    params, train_s = separator
    t0 = time.perf_counter()
    n2 = validation_sisnri(params, by_n(held_out, 2), 2)
    n3 = validation_sisnri(params, by_n(held_out, 3), 3)
    ibm2, ibm3 = ibm_sisnri(by_n(held_out, 2)), ibm_sisnri(by_n(held_out, 3))
    eval_s = time.perf_counter() - t0
    total = train_s + eval_s
    ok = n2 >= 5 and n3 >= 3 and total <= BUDGET_S and ibm2 > n2 and ibm3 > n3
    verdict(capsys, "C5 toy separation", ok,
            f"2-src {n2:.2f} dB (>= 5), 3-src {n3:.2f} dB (>= 3), IBM {ibm2:.2f}/{ibm3:.2f} dB, "
            f"train {train_s:.0f} s + eval {eval_s:.0f} s = {total:.0f} s (<= {BUDGET_S} s)")


def test_c06_four_sources(capsys, separator, held_out):
    n4 = validation_sisnri(separator[0], by_n(held_out, 4), 4)
    verdict(capsys, "C6 four-source generalization", n4 > 0, f"4-src SI-SNRi {n4:.2f} dB (> 0)")


def test_c07_fine_tuning(capsys, separator, held_out, cache_dir):
    params = separator[0]
    three = by_n(samples(TRAIN_DATA), 3)
    tuned, _ = cached(cache_dir / "finetuned.orp",
                      lambda: fine_tune_recursive(params, three, FINE_TUNE)[0],
                      save_checkpoint, load_checkpoint)
    val = by_n(held_out, 3)
    before, after = validation_sisnri(params, val, 3), validation_sisnri(tuned, val, 3)
    verdict(capsys, "C7 fine-tuning", after - before >= 0.2,
            f"3-src {before:.2f} -> {after:.2f} dB, gain {after - before:+.2f} dB (>= 0.2)")


def test_c08_counting(capsys, separator, cache_dir):
    params = separator[0]
    train = samples(COUNT_TRAIN)
    binary, _ = cached(cache_dir / "binary.orp",
                       lambda: train_binary(build_stop_training_set(params, train, seed=1), seed=1),
                       save_classifier, load_classifier)
    multi, _ = cached(cache_dir / "multiclass.orp",
                      lambda: train_count_baseline(train, 3, seed=1),
                      save_classifier, load_classifier)
    test = samples(COUNT_EVAL)
    rb = evaluate_binary_counting(params, binary, test)
    rm = evaluate_count_baseline(multi, test)
    per = ", ".join(f"{k}: {v:.2f}" for k, v in rb.per_class.items())
    verdict(capsys, "C8 counting", rb.accuracy >= 0.9 and rb.accuracy > rm.accuracy,
            f"binary recursive {rb.accuracy:.3f} (>= 0.9; per class {per}), "
            f"multiclass {rm.accuracy:.3f} (binary must be higher)")


def test_c09_dominant(capsys, separator):
    rows = dominant_eval(separator[0], [1, 5, 10], per_case=50, seed=7)
    detail = "; ".join(f"k={r.interferers}: {r.extracted_si_snr_db:.2f} vs mixture {r.mixture_si_snr_db:.2f} dB"
                       for r in rows)
    verdict(capsys, "C9 dominant source", all(r.extracted_si_snr_db > r.mixture_si_snr_db for r in rows),
            detail)


def test_c10_quality_ordering(capsys, separator, held_out):
    group = by_n(held_out, 3)[:50]
    mix = np.stack([s.mixture.samples for s in group])
    stems = oracle_stems_batch(separator[0], mix, 3)
    first, last = [], []
    for b, s in enumerate(group):
        refs = [r.samples for r in s.sources]
        perm, _ = best_permutation_score([st[b] for st in stems], refs)
        owner = {e: i for i, e in enumerate(perm)}
        first.append(si_snr(stems[0][b], refs[owner[0]]))
        last.append(si_snr(stems[-1][b], refs[owner[2]]))
    f, l = float(np.mean(first)), float(np.mean(last))
    verdict(capsys, "C10 quality ordering", f >= l, f"first stem {f:.2f} dB, last stem {l:.2f} dB")


# ---------------------------------------------------------------------------
# 11: plumbing
# ---------------------------------------------------------------------------

def test_c11_plumbing(capsys, tmp_path, separator):
    rng = np.random.default_rng(11)
    wav = Waveform(dequantize(quantize(rng.uniform(-1, 1, 4000))), 8000)
    write_wav(tmp_path / "a.wav", wav)
    wav_ok = read_wav(tmp_path / "a.wav").samples.tobytes() == wav.samples.tobytes()

    params = separator[0]
    save_checkpoint(params, tmp_path / "m.orp")
    x = np.stack([random_mixture(rng, 2).mixture.samples for _ in range(2)])
    ckpt_ok = all(a.tobytes() == b.tobytes()
                  for a, b in zip(run_batch(load_checkpoint(tmp_path / "m.orp"), x), run_batch(params, x)))

    small = SeparatorConfig(n_basis=16, mask_channels=16)
    data = samples(DatasetConfig(counts={2: 20, 3: 20}, duration=0.25, seed=3))
    cfg = TrainConfig(epochs=2, seed=9, model=small, val_fraction=0.1)
    (a, la), (b, lb) = train_orpit(data, cfg), train_orpit(data, cfg)
    train_ok = la.losses() == lb.losses() and all(
        a.tensors[k].data.tobytes() == b.tensors[k].data.tobytes() for k in a.tensors)
    verdict(capsys, "C11 plumbing", wav_ok and ckpt_ok and train_ok,
            f"WAV roundtrip {wav_ok}, checkpoint forward {ckpt_ok}, training reproducible {train_ok}")
