import csv
import json
from pathlib import Path

import numpy as np
import pytest

from feddom.analysis import (TRACE_COLUMNS, AssumptionEstimates, CodecProbe, QuadraticFederation, TraceLog,
                             check_monotonic_decrease, diagnose, estimate_assumptions, estimate_l1, estimate_l2,
                             estimate_sigma2, estimate_v, eta_upper_bound, monotone_lambda, read_trace_csv,
                             round_decrease_check, write_diagnostics)
from feddom.channel import ChannelConfig
from feddom.data import gen_synthetic_domain
from feddom.jscc_model import JsccModel
from feddom.utils import ConfigurationError, UsageError

A = np.array([1.0, 2.0, 3.0])


def trace(round_index, start, grads=(1.0, 1.0, 1.0, 0.5, 0.5), lr=0.01, lam=0.0) -> TraceLog:
    t = TraceLog(round=round_index, start_loss=start, start_grad_norm_sq=sum(grads))
    for g in grads:
        t.append(0.0 if start is None else start, g, lr, lam)
    return t


class TestEstimators:
    def test_l1_of_quadratic_is_largest_curvature(self):
        estimate = estimate_l1(lambda theta: A * theta, np.ones(3), probes=200, rng=np.random.default_rng(0))
        assert estimate == pytest.approx(3.0, rel=0.05)
        assert estimate <= 3.0 + 1e-9

    def test_l1_of_linear_loss_is_zero(self):
        estimate = estimate_l1(lambda theta: np.array([1.0, -2.0]), np.zeros(2), probes=10,
                               rng=np.random.default_rng(0))
        assert estimate == pytest.approx(0.0, abs=1e-12)

    def test_zero_probes(self):
        with pytest.raises(UsageError):
            estimate_l1(lambda theta: theta, np.zeros(2), probes=0, rng=np.random.default_rng(0))

    def test_l2_of_linear_feature_map(self):
        image = np.array([0.6, 0.8, 0.0])
        estimate = estimate_l2(lambda theta: np.array([theta @ image]), np.zeros(3), probes=200,
                               rng=np.random.default_rng(1))
        assert 0.9 <= estimate <= 1.0 + 1e-9

    def test_l2_of_constant_feature_map(self):
        estimate = estimate_l2(lambda theta: np.ones(4), np.zeros(3), probes=5, rng=np.random.default_rng(1))
        assert estimate == 0.0

    def test_l2_is_non_decreasing_in_probes(self):
        fn = lambda theta: np.tanh(theta * A)  # noqa: E731
        few = estimate_l2(fn, np.ones(3), probes=3, rng=np.random.default_rng(7))
        many = estimate_l2(fn, np.ones(3), probes=30, rng=np.random.default_rng(7))
        assert many >= few

    def test_sigma2_and_v(self):
        grads = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, 3.0])]
        full = np.zeros(2)
        assert estimate_sigma2(grads, full) == pytest.approx((1 + 1 + 9) / 3)
        assert estimate_v(grads) == pytest.approx(3.0)
        assert estimate_sigma2([np.ones(2), np.ones(2)]) == 0.0

    def test_negative_estimates_rejected(self):
        with pytest.raises(ConfigurationError):
            AssumptionEstimates(L1=-1.0, L2=0.0, sigma2=0.0, V=0.0)

    def test_codec_probe(self, small_model_cfg):
        params = JsccModel(small_model_cfg, np.random.default_rng(0)).params()
        images = gen_synthetic_domain("cartoon", 4, (16, 16), seed=0)
        probe = CodecProbe(small_model_cfg, ChannelConfig(), params, images, snr_db=5.0, seed=1)
        np.testing.assert_array_equal(probe.gradient(probe.theta), probe.gradient(probe.theta))
        est = estimate_assumptions(probe, probes=2, rng=np.random.default_rng(0), batch_size=2)
        assert est.L1 > 0
        assert est.L2 > 0
        assert est.sigma2 >= 0
        assert est.V > 0
        assert est.samples == {"probes": 2, "images": 4, "batches": 2}


class TestBounds:
    def test_decrease_bound_reference_value(self):
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=1.0, V=0.1)
        check = round_decrease_check(trace(1, 1.0), trace(2, 0.9), est, eta=0.01, lam=0.0, E=5)
        assert check.bound_rhs_delta == pytest.approx(-0.0355)
        assert check.empirical_delta == pytest.approx(-0.1)
        assert check.satisfied

    def test_lambda_term_adds_penalty(self):
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=1.0, V=0.1)
        without = round_decrease_check(trace(1, 1.0), trace(2, 1.0), est, eta=0.01, lam=0.0, E=5)
        with_lam = round_decrease_check(trace(1, 1.0), trace(2, 1.0), est, eta=0.01, lam=1.0, E=5)
        assert with_lam.bound_rhs_delta - without.bound_rhs_delta == pytest.approx(0.005)
        assert not with_lam.satisfied

    def test_bound_is_negative_for_small_eta(self):
        est = AssumptionEstimates(L1=4.0, L2=0.0, sigma2=0.0, V=0.0)
        check = round_decrease_check(trace(1, 1.0), trace(2, 1.0), est, eta=0.4, lam=0.0, E=5)
        assert check.bound_rhs_delta < 0

    def test_missing_steps(self):
        est = AssumptionEstimates(L1=1.0, L2=0.0, sigma2=0.0, V=0.0)
        with pytest.raises(UsageError):
            round_decrease_check(trace(1, 1.0, grads=(1.0,)), trace(2, 1.0), est, eta=0.1, lam=0.0, E=5)

    def test_missing_start_loss(self):
        est = AssumptionEstimates(L1=1.0, L2=0.0, sigma2=0.0, V=0.0)
        with pytest.raises(UsageError):
            round_decrease_check(trace(1, None), trace(2, 1.0), est, eta=0.1, lam=0.0, E=5)

    def test_eta_bound_reference_value(self):
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=1.0, V=0.1)
        bound = eta_upper_bound([1.0, 1.0, 1.0, 0.5, 0.5], est, lam=1.0, E=5)
        assert bound.admissible
        assert bound.value == pytest.approx(7 / 90)

    def test_eta_bound_without_penalty_or_noise_is_exact(self):
        est = AssumptionEstimates(L1=3.0, L2=5.0, sigma2=0.0, V=2.0)
        assert eta_upper_bound([0.3, 7.0], est, lam=0.0, E=2).value == 2.0 / 3.0

    def test_eta_bound_without_admissible_rate(self):
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=1.0, V=0.1)
        bound = eta_upper_bound([0.1, 0.1], est, lam=1.0, E=5)
        assert bound == type(bound)(0.0, False)

    def test_monotone_lambda(self):
        est = AssumptionEstimates(L1=1.0, L2=1.0, sigma2=0.0, V=0.1)
        assert monotone_lambda(1.0, est, E=10) == pytest.approx(1.0)
        assert monotone_lambda(0.0, est, E=10) == 0.0
        assert monotone_lambda(1.0, AssumptionEstimates(L1=1.0, L2=1.0, sigma2=0.0, V=1e12), E=10) < 1e-10

    def test_bounds_are_pure(self):
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=1.0, V=0.1)
        first = round_decrease_check(trace(1, 1.0), trace(2, 0.5), est, eta=0.01, lam=1.0, E=5)
        second = round_decrease_check(trace(1, 1.0), trace(2, 0.5), est, eta=0.01, lam=1.0, E=5)
        assert first == second


class TestMonotonicDecrease:
    def test_strictly_decreasing(self):
        report = check_monotonic_decrease([trace(r, 10.0 - r) for r in range(1, 6)])
        assert report.compliant_fraction == 1.0
        assert report.flagged_rounds == []
        assert not report.diverged

    def test_constant_trace_is_compliant(self):
        assert check_monotonic_decrease([trace(r, 2.0) for r in range(1, 6)]).compliant_fraction == 1.0

    def test_flags_increase(self):
        losses = [5.0, 4.0, 4.5, 3.0]
        report = check_monotonic_decrease([trace(r + 1, v) for r, v in enumerate(losses)])
        assert report.flagged_rounds == [2]
        assert report.compliant_fraction == pytest.approx(2 / 3)

    def test_window_smooths_noise(self):
        losses = [5.0, 4.0, 4.2, 3.0, 3.1, 2.0]
        raw = check_monotonic_decrease([trace(r + 1, v) for r, v in enumerate(losses)])
        smoothed = check_monotonic_decrease([trace(r + 1, v) for r, v in enumerate(losses)], window=2)
        assert raw.flagged_rounds
        assert smoothed.compliant_fraction == 1.0

    def test_split_by_eta_admissibility(self):
        est = AssumptionEstimates(L1=10.0, L2=0.0, sigma2=0.0, V=0.0)
        traces = [trace(1, 3.0, lr=0.1), trace(2, 2.0, lr=0.5), trace(3, 2.5, lr=0.1), trace(4, 2.0, lr=0.1)]
        report = check_monotonic_decrease(traces, est=est)
        assert report.compliant_fraction_admissible_eta == pytest.approx(1.0)
        assert report.compliant_fraction_inadmissible_eta == pytest.approx(0.0)

    def test_missing_start_loss(self):
        with pytest.raises(UsageError):
            check_monotonic_decrease([trace(1, None)])


class TestQuadraticFederation:
    def _federation(self, eta, E=3):
        return QuadraticFederation(curvature=A, optima=[[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0], [0.5, 0.0, -0.5]],
                                   eta=eta, E=E)

    def test_decrease_bound_holds_with_analytic_constants(self):
        fed = self._federation(eta=0.2)
        traces = fed.run([5.0, 5.0, 5.0], rounds=15)
        checks = [round_decrease_check(cur, nxt, fed.estimates, fed.eta, 0.0, fed.E)
                  for cur, nxt in zip(traces, traces[1:])]
        assert np.mean([c.satisfied for c in checks]) >= 0.99
        assert check_monotonic_decrease(traces).compliant_fraction == 1.0

    def test_analytic_eta_bound(self):
        fed = self._federation(eta=0.2)
        assert eta_upper_bound([1.0, 2.0], fed.estimates, lam=0.0, E=fed.E).value == 2.0 / 3.0

    def test_divergence_above_two_over_l1(self):
        fed = self._federation(eta=0.8, E=1)
        report = check_monotonic_decrease(fed.run([5.0, 5.0, 5.0], rounds=20))
        assert report.diverged
        assert report.divergence_round <= 20

    def test_invalid_shapes(self):
        with pytest.raises(ConfigurationError):
            QuadraticFederation(curvature=A, optima=[[1.0, 2.0]], eta=0.1)


class TestTraceFiles:
    def _write(self, path: Path) -> None:
        rows = [
            (1, 0, "photo", -1, 1.0, "nan", "nan", "nan", 4.0, 0.01, 1.5),
            (1, 0, "photo", 0, 1.0, 0.9, 0.1, 0.0, 4.0, 0.01, 1.5),
            (2, 0, "photo", -1, 0.9, "nan", "nan", "nan", 3.0, 0.01, 1.5),
            (2, 0, "photo", 0, 0.9, 0.8, 0.1, 0.0, 3.0, 0.01, 1.5),
        ]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(rows)

    def test_read_trace(self, tmp_path: Path):
        path = tmp_path / "trace.csv"
        self._write(path)
        traces = read_trace_csv(path)
        assert [(t.round, t.client_id, t.steps) for t in traces] == [(1, 0, 1), (2, 0, 1)]
        assert traces[0].start_loss == 1.0
        assert traces[1].start_grad_norm_sq == 3.0
        assert traces[0].lambdas == [1.5]

    def test_bad_header(self, tmp_path: Path):
        path = tmp_path / "trace.csv"
        path.write_text("round,loss\n1,2.0\n")
        with pytest.raises(ConfigurationError):
            read_trace_csv(path)

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(ConfigurationError):
            read_trace_csv(tmp_path / "absent.csv")

    def test_diagnose_and_write(self, tmp_path: Path):
        path = tmp_path / "trace.csv"
        self._write(path)
        est = AssumptionEstimates(L1=10.0, L2=1.0, sigma2=0.1, V=0.1)
        diag = diagnose(read_trace_csv(path), est)
        client = diag["clients"]["0"]
        assert diag["verdicts_conditional_on_estimates"] is True
        assert client["domain"] == "photo"
        assert len(client["decrease_checks"]) == 1
        assert client["monotonic"]["compliant_fraction"] == 1.0
        out = tmp_path / "diag" / "diagnostics.json"
        write_diagnostics(diag, out)
        assert json.loads(out.read_text())["estimates"]["L1"] == 10.0
