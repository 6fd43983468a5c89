"""Acceptance gate: one test per release criterion, each printing a
single pass/fail line (visible with `pytest -s` or on failure).
"""

import math
import struct
import sys
import time

import numpy as np
import pytest

from nsvd import calibration as cb
from nsvd import compress as cp
from nsvd import container as ct
from nsvd import evalbench as eb
from nsvd import linalg
from nsvd.cli import main as cli_main
from nsvd.errors import FormatError


def record(num: int, name: str, ok: bool, detail: str):
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def gaussian(seed, m=32, n=24, p=64):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, n)), rng.standard_normal((n, p))


def all_method_layers(a, x, budget, tau=1e-10):
    stats = cb.GramStats(dim=a.shape[1]).accumulate(x)
    layers = {}
    for method in cp.METHODS:
        w = eb._whitener_for(method, stats, tau)
        layers[method] = cp.compress_layer(a, method, budget, w)
    return layers


def test_criterion_1_whitened_loss_identities():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rep = eb.verify_loss_identities(seed, m=32, n=24, p=64)
        worst = max(worst, rep.identity_residual,
                    float(rep.notes[0].split("=")[1]))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 5.0
    record(1, "single-drop and tail-truncation loss identities", ok,
           f"max residual {worst:.2e} over 100 trials in {elapsed:.2f}s")


def test_criterion_2_cholesky_eigen_equivalence():
    worst = max(eb.verify_whitener_equivalence(seed)["gap"]
                for seed in range(100))
    record(2, "Cholesky vs eigen-sqrt whitening reconstruction equivalence",
           worst <= 1e-6, f"max relative gap {worst:.2e} over 100 trials")


def test_criterion_3_gamma_whitener_bound(capsys):
    worst_trace = 0.0
    worst_residual = 0.0
    for seed in range(100):
        out = eb.verify_scaled_whitener_bound(seed)
        worst_trace = max(worst_trace, out["max_trace_factor"])
        worst_residual = max(worst_residual, out["residual_sqrt_form"])
    code = cli_main(["verify", "--seed", "0", "--trials", "3"])
    printed = capsys.readouterr().out
    note_reported = ("square-root" in printed and "linear-trace" in printed
                     and "squared-trace" in printed)
    ok = (worst_trace <= 1.0 + 1e-10 and worst_residual <= 1e-8
          and code == 0 and note_reported)
    record(3, "gamma-whitener trace bound, per-mode loss, exponent note",
           ok, f"max trace {worst_trace:.12f}, max residual "
               f"{worst_residual:.2e}, note printed: {note_reported}")


def test_criterion_4_optimal_truncation():
    worst_eq = 0.0
    beaten = True
    rng = np.random.default_rng(2024)
    for seed in range(100):
        a, _ = gaussian(seed, m=12, n=9, p=9)
        k = 3
        factors, loss = linalg.tsvd(a, k)
        sigma = linalg.svd(a).sigma
        expected = float(np.sqrt(np.sum(sigma[k:] ** 2)))
        worst_eq = max(worst_eq, abs(loss - expected) / max(expected, 1.0))
        for _ in range(100):
            w = rng.standard_normal((12, k))
            z = np.linalg.lstsq(w, a, rcond=None)[0]
            if loss > np.linalg.norm(a - w @ z) + 1e-9:
                beaten = False
    ok = worst_eq <= 1e-10 and beaten
    record(4, "truncated SVD is the optimal rank-k approximation", ok,
           f"max tail-equality residual {worst_eq:.2e}; "
           f"unbeaten by 100x100 random candidates: {beaten}")


def test_criterion_5_storage_and_flop_parity():
    a, x = gaussian(0)
    m, n = a.shape
    q = x.shape[1]
    stats = cb.GramStats(dim=n).accumulate(x)
    w = cb.whitener_cholesky(stats)
    ok = True
    detail = ""
    for ratio in (0.2, 0.3, 0.5):
        for split in (0.99, 0.95, 0.9, 0.85, 0.8):
            budget = cp.rank_budget(m, n, ratio, split)
            for method in ("nsvd1", "nid1"):
                nested = cp.compress_layer(a, method, budget, w)
                flat = cp.compress_layer(a, "asvd1", budget, w)
                parity = (nested.stored_entries()
                          == flat.stored_entries()
                          == (m + n) * (budget.k1 + budget.k2))
                counter = cp.FlopCounter()
                cp.apply(nested, x, counter)
                predicted = 2 * (n + m) * q * (budget.k1 + budget.k2)
                flops_match = counter.matmul_flops == predicted
                if not (parity and flops_match):
                    ok = False
                    detail = (f"ratio {ratio} split {split} {method}: "
                              f"parity {parity}, flops {flops_match}")
    record(5, "nested storage and apply-flop parity with flat at rank k",
           ok, detail or "15 grid points x 2 nested methods, exact")


def test_criterion_6_calibration_optimality():
    violations = 0
    worst_margin = 0.0
    for seed in range(100):
        a, x = gaussian(seed)
        budget = cp.rank_budget(*a.shape, 0.3, split=0.95)
        layers = all_method_layers(a, x, budget)
        losses = {method: eb.activation_loss(a, layer, x)
                  for method, layer in layers.items()}
        floor = min(losses.values())
        margin = (losses["asvd1"] - floor) / max(floor, 1e-30)
        worst_margin = max(worst_margin, margin)
        # 1e-9 slack absorbs the numerical tie with the eigen-sqrt variant
        if margin > 1e-9:
            violations += 1
    record(6, "Cholesky-whitened compression minimizes calibration loss",
           violations == 0,
           f"{100 - violations}/100 trials, worst tie margin "
           f"{worst_margin:.2e}")


def test_criterion_7_nested_monotonicity():
    violations = 0
    for seed in range(100):
        a, x = gaussian(seed)
        budget = cp.rank_budget(*a.shape, 0.3, split=0.8)
        assert budget.k2 >= 1
        layers = all_method_layers(a, x, budget)
        for method in ("nsvd1", "nsvd2", "nid1", "nid2"):
            layer = layers[method]
            stage1_only = np.linalg.norm(a - layer.stage1.w @ layer.stage1.z)
            both = np.linalg.norm(a - layer.reconstruct())
            if both > stage1_only + 1e-12:
                violations += 1
    record(7, "residual stage never increases the plain loss", violations == 0,
           f"{violations} violations over 100 trials x 4 nested methods")


def test_criterion_8_distribution_shift_benchmark():
    # rotation angle chosen so mean pair cosine similarity lands near 0.45
    angle = math.acos(0.45 / 0.93)
    spec = eb.ShiftSpec(n=48, p_cal=256, p_eval=256, angle=angle,
                        spectrum_decay=0.85, seed=42)
    x_cal, x_eval, _ = eb.generate_shifted(spec)
    mean_cos, _, _ = eb.cosine_similarity_profile(x_cal, x_eval, pairs=50000)

    start = time.perf_counter()
    rows = eb.sweep(["asvd1", "nsvd1"], [0.3], [0.95], spec, trials=200)
    summary = eb.sweep_summary(rows)
    elapsed = time.perf_counter() - start
    win_rate = summary["methods"]["nsvd1"]["win_rate_vs_asvd1"]

    rerun = eb.sweep(["asvd1", "nsvd1"], [0.3], [0.95], spec, trials=200)
    deterministic = eb.rows_to_csv(rows) == eb.rows_to_csv(rerun)

    ok = (abs(mean_cos - 0.45) < 0.05 and elapsed < 60.0 and deterministic
          and summary["methods"]["nsvd1"]["rows"] == 200)
    record(8, "shifted-activation benchmark emits a deterministic win-rate",
           ok, f"mean cosine {mean_cos:.3f}, nested-vs-flat eval win-rate "
               f"{win_rate:.3f} over 200 trials in {elapsed:.1f}s")


def test_criterion_9_split_sweep_protocol():
    splits = [0.99, 0.95, 0.90, 0.85, 0.80]
    spec = eb.ShiftSpec(n=32, p_cal=96, p_eval=96, angle=0.9,
                        spectrum_decay=0.85, seed=5)
    rows = eb.sweep(["nsvd1", "nid1"], [0.3], splits, spec, trials=10)
    summary = eb.sweep_summary(rows)
    ok = True
    verdicts = {}
    for method in ("nsvd1", "nid1"):
        mono = summary["methods"][method]["split_monotonicity"]
        for metric in ("plain_loss", "cal_loss", "eval_loss"):
            entry = mono[metric]
            if entry["splits"] != sorted(splits, reverse=True):
                ok = False
            if len(entry["means"]) != len(splits):
                ok = False
            if entry["verdict"] not in {"non-increasing", "non-decreasing",
                                        "non-monotone", "single-point"}:
                ok = False
        verdicts[method] = mono["eval_loss"]["verdict"]
    record(9, "split sweep covers the protocol grid with per-metric "
              "monotonicity diagnostics", ok,
           f"eval-loss verdicts {verdicts}")


def test_criterion_10_container_format(tmp_path):
    rng = np.random.default_rng(99)
    path = tmp_path / "rt.nsvd"
    exact = True
    for trial in range(1000):
        c = ct.TensorContainer()
        for i in range(int(rng.integers(0, 4))):
            shape = tuple(int(v) for v in
                          rng.integers(1, 6, size=int(rng.integers(1, 4))))
            dtype = "<f4" if rng.integers(2) else "<f8"
            c.add(f"n{i}", rng.standard_normal(shape).astype(dtype))
        ct.write_container(path, c)
        first = path.read_bytes()
        ct.write_container(path, ct.read_container(path))
        if path.read_bytes() != first:
            exact = False

    good = ct.TensorContainer()
    good.add("x", np.arange(4, dtype="<f8"))
    ct.write_container(path, good)
    blob = path.read_bytes()
    dtype_bad = bytearray(blob)
    dtype_bad[15] = 1  # reserved dtype code
    fixtures = [
        b"XSVD" + blob[4:],                                   # bad magic
        blob[:6],                                             # truncated header
        blob[:-4],                                            # truncated data
        blob + b"\x00",                                       # trailing bytes
        bytes(dtype_bad),                                     # reserved dtype
        blob[:4] + struct.pack("<II", 1, 2) + blob[12:] * 2,  # duplicate names
    ]
    rejected = 0
    for fixture in fixtures:
        bad = tmp_path / "bad.nsvd"
        bad.write_bytes(fixture)
        with pytest.raises(FormatError):
            ct.read_container(bad)
        rejected += 1
    ok = exact and rejected == len(fixtures)
    record(10, "container round-trips bitwise and rejects malformed files",
           ok, f"1000/1000 round-trips exact, {rejected}/{len(fixtures)} "
               f"malformed fixtures rejected")
