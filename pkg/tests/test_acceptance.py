"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in an
"acceptance criteria" section at the end of the pytest report. Criteria 1 and
2 share one set of ten training runs (about half an hour on one CPU core).
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cycleflow.dataset import SyntheticSpec, generate_synthetic, pair_batches, synthetic_utterances
from cycleflow.evaluation import PAIR_NAMES, discrete_mi, label_mi, mi_report
from cycleflow.model import FACTORS, FactorModel, FactorSet, ModelConfig
from cycleflow.signal import ResampleSpec, random_resample
from cycleflow.training import (
    LinearToy,
    PitchSurrogate,
    TrainConfig,
    build_model,
    compute_losses,
    evaluate_reconstruction,
    rfs,
    train,
)

# -- tolerances, all as stated by the acceptance criteria ---------------------------
MI_WINS_REQUIRED = 5            # of the six pairs
N_TRAIN_SEEDS = 5
MAX_RUN_SECONDS = 30 * 60
REC_PARITY = 0.15
CLOSED_FORM_TOL = 1e-9
INDEPENDENT_MI_MAX = 0.01
N_FUZZ = 1000
GRAD_REL_TOL = 1e-3
TOY_CYCLE_TARGET = 1e-4
TOY_CORR_MAX = 0.05
TOY_PAIRS = 10_000
RFS_SEEDS = 10_000
CHOICE_SEEDS = 4000
CHOICE_BAND = (900, 1100)
RR_DRAWS = 1000

# -- the desk-scale training recipe used for criteria 1 and 2 -------------------------
CORPUS = SyntheticSpec(n_speakers=4, n_contents=4, pitch_patterns=2, rhythm_patterns=2,
                       utterances_per_cell=3, seed=0)
HELD_OUT_TAKE = 2
MODEL = ModelConfig(enc_channels=32, dec_channels=64)
STEPS = 800


def _train_config(alpha, seed):
    return TrainConfig(alpha=alpha, steps=STEPS, seed=seed)


# ======================================================================================
# criteria 1 and 2
# ======================================================================================

@pytest.fixture(scope="module")
def paired_runs():
    corpus = generate_synthetic(CORPUS)
    utts, embedder = synthetic_utterances(corpus)
    train_set = [u for u in utts if u.labels["take"] != HELD_OUT_TAKE]
    test_set = [u for u in utts if u.labels["take"] == HELD_OUT_TAKE]
    runs = {0.0: [], 5.0: []}
    for seed in range(N_TRAIN_SEEDS):
        for alpha in runs:
            t0 = time.perf_counter()
            model, _ = train(build_model(MODEL, seed), train_set, _train_config(alpha, seed), embedder)
            seconds = time.perf_counter() - t0
            report = mi_report(model, test_set, seed=seed)
            runs[alpha].append({
                "seed": seed, "seconds": seconds, "mi": report.values,
                "rec": evaluate_reconstruction(model, test_set),
                "zf_pitch": label_mi(model, test_set, "Z_f", "frame_pitch_level", seed=seed),
                "zf_content": label_mi(model, test_set, "Z_f", "frame_phone", seed=seed),
            })
    return runs


def test_criterion_1_mi_direction(paired_runs, acceptance_report):
    sf = {p: np.mean([r["mi"][p] for r in paired_runs[0.0]]) for p in PAIR_NAMES}
    cf = {p: np.mean([r["mi"][p] for r in paired_runs[5.0]]) for p in PAIR_NAMES}
    wins = [p for p in PAIR_NAMES if cf[p] < sf[p]]
    slowest = max(r["seconds"] for rs in paired_runs.values() for r in rs)
    detail = ", ".join(f"{p}: {sf[p]:.3f}->{cf[p]:.3f}" for p in PAIR_NAMES)
    ok = len(wins) >= MI_WINS_REQUIRED and slowest <= MAX_RUN_SECONDS
    acceptance_report(1, "MI direction", ok,
                      f"CycleFlow lower on {len(wins)}/6 pairs (need {MI_WINS_REQUIRED}); "
                      f"{detail}; slowest run {slowest:.0f}s")
    assert slowest <= MAX_RUN_SECONDS
    assert len(wins) >= MI_WINS_REQUIRED


def test_criterion_2_reconstruction_parity(paired_runs, acceptance_report):
    sf = float(np.mean([r["rec"] for r in paired_runs[0.0]]))
    cf = float(np.mean([r["rec"] for r in paired_runs[5.0]]))
    gap = (cf - sf) / sf
    ok = abs(gap) <= REC_PARITY
    acceptance_report(2, "reconstruction parity", ok,
                      f"held-out rec SpeechFlow {sf:.4f}, CycleFlow {cf:.4f}, "
                      f"relative gap {gap:+.1%} (limit {REC_PARITY:.0%})")
    assert ok


def test_ground_truth_pitch_factor(paired_runs):
    """Z_f clusters share more information with pitch labels than with content labels."""
    for r in paired_runs[5.0]:
        assert r["zf_pitch"] > r["zf_content"], r


# ======================================================================================
# criterion 3: MI estimator oracle suite
# ======================================================================================

def _h(*probs):
    return -sum(p * math.log(p) for p in probs if p > 0)


# (joint count table, closed-form MI in nats)
CLOSED_FORM_CASES = [
    ([[1, 0], [0, 1]], math.log(2)),                                     # copy, uniform binary
    (np.eye(10, dtype=int).tolist(), math.log(10)),                     # copy, uniform 10-ary
    ([[1, 1, 1], [1, 1, 1]], 0.0),                                      # independent uniforms
    ([[3, 1], [1, 3]], math.log(2) - _h(0.25, 0.75)),                   # binary symmetric, flip 1/4
    ([[1, 0], [1, 0], [0, 1], [0, 1]], math.log(2)),                    # b = a // 2
    ([[1, 0, 0], [0, 1, 0], [0, 0, 1]] * 2, math.log(3)),               # b = a mod 3
    ([[2, 0], [1, 1]], _h(0.75, 0.25) - 0.5 * math.log(2)),             # Z-channel
    ([[2, 0, 0], [0, 1, 0], [0, 0, 1]], 1.5 * math.log(2)),             # copy, skewed marginal
    ([[2, 3], [6, 9]], 0.0),                                            # independent, skewed
    ([[1, 0, 1], [0, 1, 1]], 0.5 * math.log(2)),                        # binary erasure, eps 1/2
]


def _ids_from_counts(counts, scale=7):
    a, b = [], []
    for i, row in enumerate(counts):
        for j, c in enumerate(row):
            a += [i] * (c * scale)
            b += [j] * (c * scale)
    perm = np.random.default_rng(len(a)).permutation(len(a))
    return np.array(a)[perm], np.array(b)[perm]


def test_criterion_3_mi_oracles(acceptance_report):
    t0 = time.perf_counter()
    errors = []
    for counts, expected in CLOSED_FORM_CASES:
        a, b = _ids_from_counts(counts)
        errors.append(abs(discrete_mi(a, b) - expected))
    worst = max(errors)

    rng = np.random.default_rng(2024)
    n, k = 100_000, 10
    indep = discrete_mi(rng.integers(0, k, n), rng.integers(0, k, n))

    fuzz_failures = 0
    for _ in range(N_FUZZ):
        size = int(rng.integers(1, 3000))
        ka, kb = int(rng.integers(1, k + 1)), int(rng.integers(1, k + 1))
        a = rng.integers(0, ka, size)
        mix = rng.random(size) < rng.random()
        b = np.where(mix, a % kb, rng.integers(0, kb, size))
        ab, ba = discrete_mi(a, b), discrete_mi(b, a)
        if not (ab == ba and 0.0 <= ab <= math.log(k)):
            fuzz_failures += 1
    seconds = time.perf_counter() - t0

    ok = (worst <= CLOSED_FORM_TOL and indep < INDEPENDENT_MI_MAX and fuzz_failures == 0
          and seconds < 60)
    acceptance_report(3, "MI estimator oracles", ok,
                      f"{len(CLOSED_FORM_CASES)} closed forms, max error {worst:.1e} "
                      f"(tol {CLOSED_FORM_TOL:g}); independent MI {indep:.5f} "
                      f"(< {INDEPENDENT_MI_MAX}); {fuzz_failures}/{N_FUZZ} fuzz failures; "
                      f"{seconds:.1f}s")
    assert len(CLOSED_FORM_CASES) == 10
    assert worst <= CLOSED_FORM_TOL
    assert indep < INDEPENDENT_MI_MAX
    assert fuzz_failures == 0
    assert seconds < 60


# ======================================================================================
# criterion 4: gradients against central finite differences
# ======================================================================================

MINIMAL = ModelConfig(d_r=2, d_f=2, d_c=2, d_t=2, enc_channels=8, dec_channels=8,
                      enc_layers=1, dec_layers=1, kernel_size=3)


def _directional(model, loss_fn, direction, eps=1e-6):
    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction) if g is not None)
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(eps * d)
        plus = float(loss_fn())
        for p, d in zip(params, direction):
            p.sub_(2 * eps * d)
        minus = float(loss_fn())
        for p, d in zip(params, direction):
            p.add_(eps * d)
    return analytic, (plus - minus) / (2 * eps)


def test_criterion_4_gradients(acceptance_report):
    t0 = time.perf_counter()
    corpus = generate_synthetic(SyntheticSpec(2, 2, 2, 2, 1, seed=3))
    utts, embedder = synthetic_utterances(corpus, speaker_dim=MINIMAL.d_t)
    torch.manual_seed(0)
    model = FactorModel(MINIMAL).double()
    batch = next(pair_batches(utts, 2, seed=0, crop_len=24))
    surrogate = PitchSurrogate()
    worst = {}
    for idx, name in enumerate(("L_rec", "L_cyc", "L")):
        def loss_fn(idx=idx):
            return compute_losses(model, batch, 5.0, 11, surrogate, embedder,
                                  detach_target=False)[idx]
        g = torch.Generator().manual_seed(idx)
        rel = []
        for _ in range(3):
            direction = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in model.parameters()]
            analytic, numeric = _directional(model, loss_fn, direction)
            rel.append(abs(analytic - numeric) / max(abs(numeric), 1e-12))
        worst[name] = max(rel)
    seconds = time.perf_counter() - t0
    ok = all(v <= GRAD_REL_TOL for v in worst.values()) and seconds < 60
    acceptance_report(4, "gradient check", ok,
                      ", ".join(f"{k} rel err {v:.1e}" for k, v in worst.items())
                      + f" (tol {GRAD_REL_TOL:g}); {seconds:.1f}s")
    assert all(v <= GRAD_REL_TOL for v in worst.values()), worst
    assert seconds < 60


# ======================================================================================
# criterion 5: linear toy independence
# ======================================================================================

def test_criterion_5_linear_toy(acceptance_report):
    t0 = time.perf_counter()
    toy = LinearToy(seed=0)
    corr_before = toy.substituted_correlation(n=TOY_PAIRS)
    toy.fit(alpha=5.0)
    cyc = toy.cycle_loss(n=TOY_PAIRS)
    corr = toy.substituted_correlation(n=TOY_PAIRS)
    seconds = time.perf_counter() - t0
    ok = cyc < TOY_CYCLE_TARGET and abs(corr) < TOY_CORR_MAX and seconds < 300
    acceptance_report(5, "linear-toy independence", ok,
                      f"cycle loss {cyc:.1e} (< {TOY_CYCLE_TARGET:g}); |corr| {abs(corr):.4f} "
                      f"(< {TOY_CORR_MAX}, was {abs(corr_before):.3f} before training) over "
                      f"{TOY_PAIRS} pairs; {seconds:.1f}s")
    assert cyc < TOY_CYCLE_TARGET
    assert abs(corr) < TOY_CORR_MAX
    assert seconds < 300


# ======================================================================================
# criterion 6: RFS and RR contracts
# ======================================================================================

def _factor_set(seed):
    g = torch.Generator().manual_seed(seed)
    return FactorSet(torch.randn(2, 5, 2, generator=g), torch.randn(2, 5, 4, generator=g),
                     torch.randn(2, 5, 8, generator=g), torch.randn(2, 16, generator=g))


def test_criterion_6_rfs_rr(acceptance_report):
    t0 = time.perf_counter()
    z1, z2 = _factor_set(1), _factor_set(2)
    violations = 0
    for seed in range(RFS_SEEDS):
        out = rfs(z1, z2, seed)
        for name in FACTORS:
            want = z2 if name == out.substituted_factor else z1
            if not torch.equal(out.z_prime[name], want[name]):
                violations += 1

    counts = {name: 0 for name in FACTORS}
    for seed in range(CHOICE_SEEDS):
        counts[rfs(z1, z2, seed).substituted_factor] += 1
    uniform = all(CHOICE_BAND[0] <= c <= CHOICE_BAND[1] for c in counts.values())

    rng = np.random.default_rng(6)
    identity_ok = True
    for _ in range(100):
        t = int(rng.integers(1, 400))
        seq = rng.normal(size=(t, 3))
        spec = ResampleSpec(rate_range=(1.0, 1.0), seed=int(rng.integers(2 ** 31)))
        identity_ok &= np.array_equal(random_resample(seq, spec), seq)

    bound_failures = 0
    for _ in range(RR_DRAWS):
        t = int(rng.integers(1, 500))
        lo = int(rng.integers(1, 40))
        hi = lo + int(rng.integers(0, 30))
        r_lo = float(rng.uniform(0.1, 2.0))
        r_hi = r_lo + float(rng.uniform(0.0, 2.0))
        spec = ResampleSpec((lo, hi), (r_lo, r_hi), int(rng.integers(2 ** 31)))
        n_out = len(random_resample(np.zeros((t, 1)), spec))
        if not (t * r_lo - hi <= n_out <= t * r_hi + hi):
            bound_failures += 1
    seconds = time.perf_counter() - t0

    ok = violations == 0 and uniform and identity_ok and bound_failures == 0 and seconds < 60
    acceptance_report(6, "RFS/RR contracts", ok,
                      f"{violations} substitution violations over {RFS_SEEDS} seeds; choice counts "
                      f"{counts} (band {CHOICE_BAND}); unit-rate identity {'holds' if identity_ok else 'broken'}; "
                      f"{bound_failures}/{RR_DRAWS} length-bound failures; {seconds:.1f}s")
    assert violations == 0
    assert uniform, counts
    assert identity_ok
    assert bound_failures == 0
    assert seconds < 60


# ======================================================================================
# criterion 7: end-to-end determinism through the CLI
# ======================================================================================

def _cli(cwd, *args):
    env = dict(os.environ, PYTHONHASHSEED="0")
    proc = subprocess.run([sys.executable, "-m", "cycleflow.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _pipeline(workdir: Path):
    workdir.mkdir(parents=True)
    _cli(workdir, "gen-synthetic", "--out", "corpus", "--seed", "5",
         "--set", "n_speakers=2", "--set", "n_contents=2")
    _cli(workdir, "prepare", "--corpus", "corpus", "--out", "feats", "--test-label", "rhythm=1")
    for alpha in ("0", "5"):
        _cli(workdir, "train", "--data", "feats", "--out", f"ckpt/a{alpha}.pt",
             "--alpha", alpha, "--steps", "50", "--seed", "1")
    _cli(workdir, "eval-mi", "--data", "feats", "--checkpoints", "ckpt/a0.pt", "ckpt/a5.pt",
         "--out", "report/mi", "--seeds", "0", "1")
    _cli(workdir, "convert", "--checkpoint", "ckpt/a5.pt",
         "--source", "corpus/spk0/spk0_c0_p0_r0_t0.wav",
         "--target", "corpus/spk1/spk1_c1_p1_r1_t0.wav",
         "--swap", "rhythm,pitch", "--out", "out/style.wav", "--seed", "3")
    return {p.relative_to(workdir).as_posix(): p.read_bytes()
            for p in sorted(workdir.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json", ".txt", ".wav")}


def test_criterion_7_end_to_end_determinism(tmp_path, acceptance_report):
    first = _pipeline(tmp_path / "run1")
    second = _pipeline(tmp_path / "run2")
    compared = [k for k in first if k.startswith(("ckpt/", "report/", "out/"))]
    differing = [k for k in first if first[k] != second.get(k)]
    missing = set(first) ^ set(second)
    wavs = [k for k in compared if k.endswith(".wav")]
    ok = not differing and not missing and wavs and all(
        k in first for k in ("report/mi.csv", "report/mi.json", "out/style.wav", "out/style.json",
                             "ckpt/a5.history.csv"))
    acceptance_report(7, "end-to-end determinism", bool(ok),
                      f"{len(first)} artifacts compared ({len(compared)} from train/eval-mi/convert), "
                      f"{len(differing)} differ, {len(missing)} missing")
    assert not missing
    assert not differing, differing[:5]
    assert ok
