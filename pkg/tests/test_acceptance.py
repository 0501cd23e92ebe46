"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line with its
measurement and runtime budget, then asserts. Run directly with
``python tests/test_acceptance.py`` for just the summary lines.
"""
import functools
import shutil
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import eer_midpoint_oracle, plan_violations  # noqa: E402

from wmspoof import audio, codecs, corpus, kpwl  # noqa: E402
from wmspoof.benchmark import BenchmarkConfig, run_benchmark  # noqa: E402
from wmspoof.corpus import UtteranceRecord  # noqa: E402
from wmspoof.evaluation import ScoreSet, compute_eer, relative_degradation  # noqa: E402
from wmspoof.kpwl import FeatureSet, TrainConfig  # noqa: E402


def report(n, ok, detail, elapsed, budget):
    """Print one summary line; under pytest it is repeated in the terminal summary."""
    limit = f"{budget}s" if isinstance(budget, (int, float)) else budget
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.2f}s, limit {limit}]"
    print(line)
    conftest = sys.modules.get("conftest")
    if conftest is not None:
        conftest.ACCEPTANCE_LINES.append(line)
    return ok


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


# ---------------------------------------------------------------- 1. delta reproduction

# (75%, 0%, printed delta) per row of the three published tables
DELTA_ROWS = [
    # single-watermark table on ITW
    (7.46, 7.32, 1.91), (8.18, 7.32, 11.75), (9.90, 7.32, 35.25), (9.06, 7.32, 23.77),
    # three baseline models x three eval sets
    (0.88, 0.73, 20.55), (11.28, 9.42, 19.75), (6.16, 5.86, 5.12),
    (3.68, 3.02, 21.85), (8.46, 7.32, 15.57), (2.23, 2.01, 10.94),
    (2.25, 2.00, 12.50), (6.40, 5.50, 16.36), (1.85, 1.76, 5.11),
    # multi-dataset model
    (2.82, 2.46, 14.63), (4.06, 3.17, 28.08), (1.18, 1.02, 15.69),
]


def test_criterion_1_delta_reproduction():
    with Timer() as t:
        gaps = [abs(relative_degradation(p, z) - d) for p, z, d in DELTA_ROWS]
    worst = max(gaps)
    ok = worst <= 0.01 + 1e-9 and t.elapsed < 1
    report(1, ok, f"{len(DELTA_ROWS)} delta cells, max |computed - printed| = {worst:.4f} (tol 0.01)",
           t.elapsed, 1)
    assert ok


# ---------------------------------------------------------------- 2. EER oracle

def _score_set(bona, spoof):
    return ScoreSet.from_arrays(bona + spoof, ["bonafide"] * len(bona) + ["spoof"] * len(spoof))


def test_criterion_2_eer_oracle():
    rng = np.random.default_rng(2024)
    mismatches = transform_fail = swap_fail = 0
    with Timer() as t:
        for _ in range(200):
            n = int(rng.integers(2, 51))
            n_b = int(rng.integers(1, n))
            grid = int(rng.choice([3, 10, 200]))
            scores = (rng.integers(-grid, grid + 1, n) / 8).tolist()
            bona, spoof = scores[:n_b], scores[n_b:]
            eer = compute_eer(_score_set(bona, spoof)).eer
            if eer != float(eer_midpoint_oracle(bona, spoof) * 100):
                mismatches += 1
            warp = lambda s: s ** 3 + s  # noqa: E731  strictly increasing, exact on this grid
            if compute_eer(_score_set([warp(s) for s in bona], [warp(s) for s in spoof])).eer != eer:
                transform_fail += 1
            if compute_eer(_score_set([-s for s in spoof], [-s for s in bona])).eer != eer:
                swap_fail += 1
    ok = mismatches == transform_fail == swap_fail == 0 and t.elapsed < 10
    report(2, ok, f"200 sets: oracle mismatches {mismatches}, transform failures {transform_fail}, "
                  f"label-swap failures {swap_fail}", t.elapsed, 10)
    assert ok


# ---------------------------------------------------------------- 3. codec round trip

def test_criterion_3_codec_roundtrip():
    worst_ber, worst_snr = {}, {}
    with Timer() as t:
        for scheme in codecs.SCHEMES:
            cfg = codecs.CodecConfig(scheme, key=7)
            bers, snrs = [], []
            for trial in range(100):
                clip = audio.noise_plus_tones(1000 + trial, seconds=4)
                payload = codecs.WatermarkPayload.random(16, np.random.default_rng([trial, 16]))
                marked = codecs.embed(clip, payload, cfg)
                bers.append(codecs.bit_error_rate(payload.bits, codecs.detect(marked, 16, cfg).bits))
                snrs.append(audio.segmental_snr(clip, marked))
            worst_ber[scheme], worst_snr[scheme] = max(bers), min(snrs)
    ok = all(b == 0 for b in worst_ber.values()) and all(s >= 20 for s in worst_snr.values()) \
        and t.elapsed < 120
    detail = ", ".join(f"{s} BER<={worst_ber[s]:.3f} SNR>={worst_snr[s]:.1f}dB" for s in codecs.SCHEMES)
    report(3, ok, f"600 trials: {detail}", t.elapsed, 120)
    assert ok


# ---------------------------------------------------------------- 4. robustness monotonicity

ATTACK_LEVELS = (40, 30, 20, 10, 0)


def test_criterion_4_robustness_monotonicity():
    curves = {}
    with Timer() as t:
        for scheme in codecs.SCHEMES:
            cfg = codecs.CodecConfig(scheme, key=7)
            sums = np.zeros(len(ATTACK_LEVELS))
            for trial in range(20):
                clip = audio.noise_plus_tones(trial, seconds=4)
                payload = codecs.WatermarkPayload.random(16, np.random.default_rng([trial, 4]))
                marked = codecs.embed(clip, payload, cfg)
                for k, snr in enumerate(ATTACK_LEVELS):
                    hit = audio.attack(marked, audio.AdditiveNoise(snr, seed=trial))
                    sums[k] += codecs.bit_error_rate(payload.bits, codecs.detect(hit, 16, cfg).bits)
            curves[scheme] = sums / 20
    monotone = {s: bool(np.all(np.diff(c) >= 0)) for s, c in curves.items()}
    ok = all(monotone.values()) and t.elapsed < 300
    detail = "; ".join(f"{s} {'ok' if monotone[s] else 'NOT monotone'} "
                       f"[{' '.join(f'{v:.3f}' for v in c)}]" for s, c in curves.items())
    report(4, ok, f"mean BER at {ATTACK_LEVELS} dB: {detail}", t.elapsed, 300)
    assert ok


# ---------------------------------------------------------------- 5. mix plan constraints

def test_criterion_5_mix_plan(tmp_path):
    rng = np.random.default_rng(5)
    ids = [f"u{i:05d}" for i in range(10000)]
    paths = [f"{u}.wav" for u in ids]
    bad_cases, roundtrip_fail = [], 0
    path = tmp_path / "plan.txt"
    with Timer() as t:
        for case in range(1000):
            n = int(rng.integers(1, 10001)) if case % 10 else int(rng.integers(1, 30))
            skew = float(rng.choice([0.0, 0.01, 0.1, 0.5, 0.9, 1.0, rng.random()]))
            ratio = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, rng.random()]))
            labels = rng.random(n) < skew
            recs = [UtteranceRecord(ids[i], paths[i], "bonafide" if b else "spoof")
                    for i, b in enumerate(labels)]
            seed = int(rng.integers(0, 2 ** 31))
            plan = corpus.build_mix_plan(recs, ratio, seed)
            bad = plan_violations(plan, ratio)
            if corpus.build_mix_plan(list(reversed(recs)), ratio, seed) != plan:
                bad.append("determinism")
            if bad:
                bad_cases.append((case, bad))
            if case % 4 == 0:
                corpus.serialize_plan(plan, path)
                if corpus.load_plan(path) != plan:
                    roundtrip_fail += 1
    ok = not bad_cases and roundtrip_fail == 0 and t.elapsed < 30
    report(5, ok, f"1000 cases: invariant failures {len(bad_cases)}, round-trip failures "
                  f"{roundtrip_fail} of 250 serialised", t.elapsed, 30)
    assert ok, bad_cases[:5]


# ---------------------------------------------------------------- 6. materialisation determinism

def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_6_materialize_determinism(tmp_path):
    recs = [UtteranceRecord(f"u{i:03d}", f"{'b' if i % 4 else 'a'}/u{i:03d}.wav",
                            "bonafide" if i % 5 == 0 else "spoof") for i in range(50)]
    src, ext = tmp_path / "src", tmp_path / "ext"
    for i, r in enumerate(recs):
        for root, rate in ((src, 22050), (ext, 16000)):
            (root / r.path).parent.mkdir(parents=True, exist_ok=True)
            audio.write_wav(audio.noise_plus_tones(i, seconds=2, sample_rate=rate), root / r.path)
    plan = corpus.build_mix_plan(recs, 0.5, 11)
    externals = {name: ext for name in ("wavmark", "timbre", "audioseal")}
    with Timer() as t:
        r1 = corpus.materialize(plan, src, tmp_path / "o1", externals, jobs=1)
        r2 = corpus.materialize(plan, src, tmp_path / "o2", externals, jobs=4)
        t1, t2 = _tree(tmp_path / "o1"), _tree(tmp_path / "o2")
    same = t1 == t2 and r1.to_tsv() == r2.to_tsv()
    ok = same and len(t1) == 50 and not r1.failures() and t.elapsed < 60
    report(6, ok, f"50-file fixture: {len(t1)} files, trees identical={t1 == t2}, "
                  f"reports identical={r1.to_tsv() == r2.to_tsv()}", t.elapsed, 60)
    shutil.rmtree(tmp_path / "o1")
    assert ok


# ---------------------------------------------------------------- 7. loss and gradient correctness

def test_criterion_7_kpwl_objective():
    worst = 0.0
    identity_fail = hash_fail = first_fail = 0
    with Timer() as t:
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = kpwl.init_model([8, 8, 8, 2], seed)
            x, y = rng.standard_normal((16, 8)), rng.integers(0, 2, 16)
            worst = max(worst, kpwl.gradient_check(model, x, y, 0.3, 1e-4, seed=seed))

            n = 256
            labels = rng.integers(0, 2, n)
            feats = rng.standard_normal((n, 8)) + np.where(labels == 0, 1.0, -1.0)[:, None]
            data = FeatureSet(feats, labels)
            base = kpwl.freeze_ends(kpwl.pretrain(kpwl.init_model([8, 8, 8, 2], seed), data,
                                                  TrainConfig(epochs=2, seed=seed)))
            before = [base.layer_digest(i) for i in (0, base.n_layers - 1)]
            shifted = FeatureSet(feats @ (np.eye(8) + 0.2 * rng.standard_normal((8, 8))) + 0.5, labels)
            adapted, log = kpwl.kpwl_adapt(base, shifted, config=TrainConfig(lr=2e-2, epochs=2, seed=seed))
            if [adapted.layer_digest(i) for i in (0, adapted.n_layers - 1)] != before:
                hash_fail += 1
            if log[0].kd != 0.0 or log[0].l2sp != 0.0:
                first_fail += 1
            identity_fail += sum(h.total != h.task + h.beta * h.kd + h.mu * h.l2sp for h in log)
    ok = worst < 1e-4 and identity_fail == hash_fail == first_fail == 0
    report(7, ok, f"20 seeds: max grad-check error {worst:.2e} (tol 1e-4), total-identity violations "
                  f"{identity_fail}, frozen-hash changes {hash_fail}, non-zero first-batch kd/l2sp "
                  f"{first_fail}", t.elapsed, "none")
    assert ok


# ---------------------------------------------------------------- 8 and 9. synthetic benchmark

BENCH_SEEDS = (0, 1, 2, 3, 4)


@functools.lru_cache(maxsize=None)
def _benchmark(seed):
    return run_benchmark(BenchmarkConfig(seed=seed))


def test_criterion_8_kpwl_trend():
    rows = []
    with Timer() as t:
        for seed in BENCH_SEEDS:
            r = _benchmark(seed)
            shifted_b, shifted_k = r.eer("baseline", 0.75), r.eer("kpwl", 0.75)
            clean_b, clean_k = r.eer("baseline", 0.0), r.eer("kpwl", 0.0)
            good = shifted_k < shifted_b and clean_k <= 1.2 * clean_b
            rows.append((seed, good, shifted_b, shifted_k, clean_b, clean_k))
    wins = sum(r[1] for r in rows)
    ok = wins >= 4 and t.elapsed < 120
    detail = "; ".join(f"seed {s}: 75% {sb:.2f}->{sk:.2f}, 0% {cb:.2f}->{ck:.2f} {'ok' if g else 'miss'}"
                       for s, g, sb, sk, cb, ck in rows)
    report(8, ok, f"{wins}/5 seeds meet the trend ({detail})", t.elapsed, 120)
    assert ok


def test_criterion_9_three_way_report():
    with Timer() as t:
        table = _benchmark(BENCH_SEEDS[0]).table
        header = table.to_csv().splitlines()[0].split(",")
    ratio_cols = [h for h in header if h.endswith("%") and "delta" not in h]
    ok = table.rows == ["baseline", "watermarked", "kpwl"] and ratio_cols == ["75%", "50%", "25%", "0%"] \
        and all((row, r) in table.cells for row in table.rows for r in table.ratios)
    report(9, ok, f"report has {len(table.rows)} model rows x {len(ratio_cols)} ratio columns "
                  f"({', '.join(table.rows)})", t.elapsed, "none")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
