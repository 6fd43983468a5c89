"""Verification suites, similarity diagnostics, the shifted-activation
generator, and the comparison sweep."""

import csv
import io
import json
import math

import numpy as np
import pytest

from nsvd import calibration as cb
from nsvd import compress as cp
from nsvd import evalbench as eb
from nsvd.errors import ArgumentError


class TestActivationLoss:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((10, 8))
        x = rng.standard_normal((8, 30))
        layer = cp.compress_layer(a, "svd", cp.rank_budget(10, 8, 0.3))
        expected = np.linalg.norm((a - layer.reconstruct()) @ x)
        assert eb.activation_loss(a, layer, x) == pytest.approx(expected,
                                                                abs=1e-10)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((10, 8))
        layer = cp.compress_layer(a, "svd", cp.rank_budget(10, 8, 0.3))
        with pytest.raises(ArgumentError):
            eb.activation_loss(a.T, layer, rng.standard_normal((10, 5)))


class TestVerifySuites:
    @pytest.mark.parametrize("variant", ["cholesky", "eigen"])
    def test_whitened_loss_identities(self, variant):
        for seed in range(10):
            rep = eb.verify_loss_identities(seed, whitener_variant=variant)
            assert rep.identity_residual <= 1e-8
            drop = float(rep.notes[0].split("=")[1])
            assert drop <= 1e-8

    def test_cholesky_eigen_equivalence(self):
        for seed in range(10):
            out = eb.verify_whitener_equivalence(seed)
            assert out["full_rank_regime"]
            assert out["gap"] <= 1e-6

    def test_gamma_whitener_trace_bound_and_per_mode_loss(self):
        for seed in range(10):
            out = eb.verify_scaled_whitener_bound(seed)
            assert out["max_trace_factor"] <= 1.0 + 1e-10
            assert out["residual_sqrt_form"] <= 1e-8
            assert out["bound_holds"]
            # the two alternative closed forms genuinely disagree
            assert out["residual_linear_form"] > 1e-3
            assert out["residual_squared_form"] > 1e-3
            assert "square-root" in out["note"]


class TestCosineSimilarityProfile:
    def test_identical_columns(self):
        x = np.random.default_rng(2).standard_normal((6, 10))
        mean, std, skipped = eb.cosine_similarity_profile(x, x, pairs=10,
                                                          self_pairs=True)
        assert mean == pytest.approx(1.0, abs=1e-12)
        assert std == pytest.approx(0.0, abs=1e-12)
        assert skipped == 0

    def test_orthogonal_columns(self):
        cal = np.array([[1.0], [0.0]])
        ev = np.array([[0.0], [1.0]])
        mean, std, skipped = eb.cosine_similarity_profile(cal, ev, pairs=1)
        assert mean == pytest.approx(0.0, abs=1e-12)

    def test_zero_columns_skipped(self):
        cal = np.array([[1.0, 0.0], [0.0, 0.0]])
        ev = np.array([[1.0], [0.0]])
        mean, std, skipped = eb.cosine_similarity_profile(cal, ev, pairs=2,
                                                          self_pairs=True)
        assert skipped in (0, 1)  # only the zero column can be dropped

    def test_all_zero_rejected(self):
        with pytest.raises(ArgumentError):
            eb.cosine_similarity_profile(np.zeros((3, 4)), np.ones((3, 4)),
                                         pairs=4)

    def test_too_many_pairs(self):
        x = np.ones((3, 2))
        with pytest.raises(ArgumentError):
            eb.cosine_similarity_profile(x, x, pairs=5)


class TestGenerateShifted:
    def test_angle_zero_reproduces_calibration(self):
        spec = eb.ShiftSpec(n=32, p_cal=100, p_eval=100, angle=0.0, seed=3)
        x_cal, x_eval, a = eb.generate_shifted(spec)
        np.testing.assert_array_equal(x_cal, x_eval)

    def test_shapes_rank_and_spectrum(self):
        spec = eb.ShiftSpec(n=32, p_cal=120, p_eval=90, angle=0.5,
                            spectrum_decay=0.8, seed=4)
        x_cal, x_eval, a = eb.generate_shifted(spec)
        assert x_cal.shape == (32, 120)
        assert x_eval.shape == (32, 90)
        assert a.shape == (32, 32)
        assert np.linalg.matrix_rank(x_cal) == 32
        sigma = np.linalg.svd(a, compute_uv=False)
        expected = np.arange(1, 33, dtype=float) ** -0.8
        np.testing.assert_allclose(sigma, expected, atol=1e-12)

    def test_mean_cosine_tracks_angle(self):
        # mean pair cosine ~= cos(angle) * dominant-direction energy share
        angle = 1.0
        spec = eb.ShiftSpec(n=48, p_cal=400, p_eval=400, angle=angle, seed=5)
        x_cal, x_eval, _ = eb.generate_shifted(spec)
        mean, _, _ = eb.cosine_similarity_profile(x_cal, x_eval, pairs=100000)
        frac = eb.dominant_energy_fraction(x_cal)
        assert mean == pytest.approx(math.cos(angle) * frac, abs=0.03)

    def test_determinism(self):
        spec = eb.ShiftSpec(n=16, p_cal=40, p_eval=40, angle=0.3, seed=6)
        first = eb.generate_shifted(spec)
        second = eb.generate_shifted(spec)
        for lhs, rhs in zip(first, second):
            assert lhs.tobytes() == rhs.tobytes()

    def test_spec_validation(self):
        with pytest.raises(ArgumentError):
            eb.ShiftSpec(n=4, p_cal=10, p_eval=10, angle=0.0)
        with pytest.raises(ArgumentError):
            eb.ShiftSpec(n=16, p_cal=10, p_eval=10, angle=-0.1)
        with pytest.raises(ArgumentError):
            eb.ShiftSpec(n=16, p_cal=10, p_eval=10, angle=0.0,
                         spectrum_decay=0.0)


SPEC = eb.ShiftSpec(n=24, p_cal=64, p_eval=64, angle=0.6, seed=7)


class TestSweep:
    def test_deterministic_and_schedule_independent(self):
        rows1 = eb.sweep(["asvd1", "nsvd1"], [0.3], [0.9], SPEC, trials=4)
        rows2 = eb.sweep(["asvd1", "nsvd1"], [0.3], [0.9], SPEC, trials=4,
                         max_workers=3)
        assert eb.rows_to_csv(rows1) == eb.rows_to_csv(rows2)

    def test_csv_schema(self):
        rows = eb.sweep(["asvd1", "svd"], [0.3], [0.95], SPEC, trials=2)
        parsed = list(csv.reader(io.StringIO(eb.rows_to_csv(rows))))
        assert parsed[0] == eb.SWEEP_CSV_HEADER
        assert len(parsed) == 1 + len(rows)
        # float fields round-trip exactly through repr()
        for line, row in zip(parsed[1:], rows):
            assert float(line[6]) == row["eval_loss"]

    def test_asvd1_ties_itself(self):
        rows = eb.sweep(["asvd1"], [0.3], [0.95], SPEC, trials=3)
        summary = eb.sweep_summary(rows)
        entry = summary["methods"]["asvd1"]
        assert entry["wins"] == 0
        assert entry["ties"] == entry["rows"]
        assert entry["win_rate_vs_asvd1"] == 0.0

    def test_baseline_present_without_asvd1_in_methods(self):
        rows = eb.sweep(["nsvd1"], [0.3], [0.9], SPEC, trials=2)
        assert {r["method"] for r in rows} == {"nsvd1"}
        assert all(np.isfinite(r["baseline_eval_loss"]) for r in rows)

    def test_infeasible_budget_yields_skip_row(self):
        small = eb.ShiftSpec(n=8, p_cal=24, p_eval=24, angle=0.0, seed=8)
        rows = eb.sweep(["asvd1"], [0.99], [0.95], small, trials=1)
        assert all("skip_reason" in r for r in rows)
        summary = eb.sweep_summary(rows)
        assert summary["methods"] == {}
        assert len(summary["skipped"]) == 1

    def test_identity_residual_exact_for_cholesky_whitening(self):
        rows = eb.sweep(["asvd1", "asvd2"], [0.3], [0.95], SPEC, trials=3)
        for r in rows:
            assert r["identity_residual"] <= 1e-8

    def test_split_monotonicity_diagnostic(self):
        splits = [0.99, 0.95, 0.9, 0.85, 0.8]
        rows = eb.sweep(["nsvd1"], [0.3], splits, SPEC, trials=3)
        summary = eb.sweep_summary(rows)
        mono = summary["methods"]["nsvd1"]["split_monotonicity"]
        for metric in ("plain_loss", "cal_loss", "eval_loss"):
            assert mono[metric]["splits"] == sorted(splits, reverse=True)
            assert len(mono[metric]["means"]) == len(splits)
            assert mono[metric]["verdict"] in {
                "non-increasing", "non-decreasing", "non-monotone",
                "single-point"}
        # moving budget into the residual stage always helps the plain loss
        assert mono["plain_loss"]["verdict"] == "non-increasing"

    def test_unknown_method_rejected(self):
        with pytest.raises(ArgumentError):
            eb.sweep(["magic"], [0.3], [0.95], SPEC, trials=1)

    def test_summary_json_serializable(self):
        rows = eb.sweep(["asvd1"], [0.3], [0.95], SPEC, trials=2)
        payload = json.loads(eb.summary_to_json(eb.sweep_summary(rows), seed=7))
        assert payload["seed"] == 7
        assert "asvd1" in payload["methods"]
