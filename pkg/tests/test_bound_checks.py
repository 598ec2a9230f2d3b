import json
import math

import numpy as np
import pytest
from scipy.special import zeta

from bound_checks import (CHECKS, CheckReport, append_ledger, check_constrained_lower, check_exit_time,
                          check_hit_bound, check_levy_system, check_near_diag_lower, check_ondiag_upper, check_spacetime_exit,
                          check_truncated_offdiag, estimate_holder, levy_functional_from_spec, summary_table,
                          write_plot_data)
from lattice_generator import WindowError
from utils import load_jsonl, read_table


def test_report_record_leaves_out_timing(tmp_path):
    report = CheckReport("demo", {"rho": 4}, {"tol": 0.1})
    report.add("slope", -1.0000000000000002, "fit", [-1.1, -0.9])
    report.runtime = 12.5
    report.timings["level_runtime"] = [1.0]
    report.passed = True
    record = report.to_record()
    assert set(record) == {"check_name", "parameters", "tolerance", "fitted", "pass", "gated", "notes"}
    assert record["fitted"]["slope"] == {"value": -1.0, "method": "fit", "ci": [-1.1, -0.9]}

    ledger = tmp_path / "ledger.jsonl"
    append_ledger(report, str(ledger))
    append_ledger(report, str(ledger))
    lines = ledger.read_text().splitlines()
    assert len(lines) == 2 and lines[0] == lines[1]
    assert json.loads(lines[0])["pass"] is True
    assert load_jsonl(str(ledger))[0]["check_name"] == "demo"


def test_summary_and_plot_data(tmp_path):
    report = CheckReport("demo", {}, {}, gated=False)
    report.add("m_min", 0.25, "exact")
    report.plot_header = ["t", "m"]
    report.plot_rows = [[1.0, 0.25], [2.0, 0.5]]
    assert summary_table([report]) == [["demo", "FAIL", "info", "m_min", 0.25]]
    out = tmp_path / "demo.tsv"
    write_plot_data(report, str(out))
    assert out.read_text().startswith("# demo\n")
    header, rows = read_table(str(out))
    assert header == ["t", "m"] and rows[1] == ["2", "0.5"]


def test_registry_keeps_function_names():
    assert set(CHECKS) == {"ondiag_upper", "near_diag_lower", "truncated_offdiag", "exit_time", "hit_bound",
                           "constrained_lower", "levy_system", "spacetime_exit", "holder"}
    assert check_ondiag_upper.__name__ == "check_ondiag_upper"


def test_ondiag_upper_validation(cauchy_1d):
    with pytest.raises(ValueError, match="factor 8"):
        check_ondiag_upper(cauchy_1d, 4, (1.0, 2.0, 4.0))
    with pytest.raises(ValueError, match="rho\\^-alpha"):
        check_ondiag_upper(cauchy_1d, 4, (0.1, 1.0, 2.0, 4.0))


def test_ondiag_upper_small_run(cauchy_1d):
    report = check_ondiag_upper(cauchy_1d, 4, (0.5, 1.0, 2.0, 4.0), rho_compare=2, window=32.0)
    assert report.value("slope_target") == -1.0
    assert abs(report.value("slope") + 1.0) < 0.25
    assert report.value("c1_ratio") < 2.0
    assert report.value("small_time_max") <= 1.0
    assert report.value("window_error_rho4") < 0.1
    assert len(report.plot_rows) == 4
    assert report.runtime > 0


def test_near_diag_lower_small_run(cauchy_1d):
    report = check_near_diag_lower(cauchy_1d, 4, (0.5, 1.0, 2.0, 4.0), window=32.0)
    assert report.value("m_min") > 0.005
    assert report.value("center_min") >= report.value("m_min")
    assert report.passed


def test_truncated_offdiag_decay(cauchy_1d):
    report = check_truncated_offdiag(cauchy_1d)
    assert report.value("decay_rate") <= -(1 - 0.15) / 2.0
    assert report.value("curvature") <= 0.05
    assert abs(report.value("contrast_loglog_slope") + 2.0) < 0.1
    assert report.value("short_time_ratio_gap") < 0.05
    assert report.passed


def test_holder_validation(cauchy_1d):
    with pytest.raises(ValueError, match="two resolutions"):
        estimate_holder(cauchy_1d, (4, 8, 16))
    with pytest.raises(ValueError, match="not on the grid"):
        estimate_holder(cauchy_1d, (3, 6), probe_spacing=0.25)


def test_exit_time_validation(cauchy_1d):
    with pytest.raises(ValueError, match=">= 1"):
        check_exit_time(cauchy_1d, R_grid=(0.5, 1.0))
    with pytest.raises(ValueError, match="censoring"):
        check_exit_time(cauchy_1d, 8, n_paths=200, horizon_factor=1e-3)


def test_spacetime_and_constrained_validation(cauchy_1d):
    with pytest.raises(ValueError, match="exceed 2r"):
        check_spacetime_exit(cauchy_1d, 4, 1.0, (2.0, 4.0))
    with pytest.raises(ValueError, match="theta"):
        check_constrained_lower(cauchy_1d, 8, 1.0, 4.0, theta=0.1)


def test_levy_functional_from_config():
    default = levy_functional_from_spec(None, 2)
    assert default.delta == 0.5 and default.g.lo == (-1.0, -1.0)
    bare = levy_functional_from_spec({"delta": 1.0}, 1)
    assert bare.g is None and bare.h is None
    with pytest.raises(ValueError, match="degenerate functional"):
        levy_functional_from_spec({"delta": 0.5, "g": {"lo": [1.0], "hi": [0.0]}}, 1)


def test_levy_system_zero_weight_is_trivial(cauchy_1d):
    report = check_levy_system(cauchy_1d, f_spec={"delta": 0.5, "weight": 0.0}, n_paths=10)
    assert report.passed
    assert report.value("lhs") == 0.0 == report.value("rhs")


def test_levy_system_compensator_against_closed_form(cauchy_1d):
    n = 20_000
    report = check_levy_system(cauchy_1d, 4, 1.0, {"delta": 1.0}, n_paths=n, seed=3)
    closed = 4.0 * zeta(2.0, 4) / zeta(2.0, 1)
    assert report.value("closed_form") == pytest.approx(closed, rel=1e-10)
    # the intensity does not depend on the position, so every path integrates the same value
    assert report.value("rhs") == pytest.approx(closed, rel=1e-9)
    # jump counts are Poisson(closed)
    assert abs(report.value("lhs") - closed) < 5 * math.sqrt(closed / n)


def test_small_window_raises_with_measured_gap(cauchy_1d):
    with pytest.raises(WindowError, match="enlarge the window") as info:
        check_ondiag_upper(cauchy_1d, 4, (0.5, 1.0, 2.0, 4.0), rho_compare=2, window=1.0)
    report = info.value.report
    assert report.tolerance["max_window_error"] == 0.1
    assert report.value("window_error_rho4") > 0.1
    assert not report.passed
    assert report.notes and "window error" in report.notes[0]


def test_exit_time_small_run(cauchy_1d):
    report = check_exit_time(cauchy_1d, 4, R_grid=(1.0, 2.0), radii=[1.0, 2.0, 4.0], n_paths=4000, seed=1,
                             slope_tol=0.25, agreement_sigmas=4.0)
    assert report.value("censor_rate") <= 0.01
    assert report.value("gamma_min") > 0
    assert len(report.value("exact_mean_exit")) == 3
    assert report.value("mc_exact_agreement") is True
    assert report.value("mean_monotone_in_r") is True
    assert abs(report.value("median_slope") - 1.0) <= 0.25
    assert report.passed


def test_hit_bound_small_run(cauchy_1d):
    report = check_hit_bound(cauchy_1d, 2, 1.0, n_paths=20_000, seed=11, window=32.0, agreement_sigmas=4.0)
    estimates = report.value("estimates")
    assert len(estimates) == 5 and estimates[0] > 0
    assert estimates[-1] <= estimates[0]
    assert report.value("upper_last") < 0.1
    assert all(e >= 0 for e in report.value("exact"))
    assert report.value("monotone") is True
    assert report.value("mc_exact_agreement") is True
    assert report.passed


def test_constrained_lower_small_run(cauchy_1d):
    report = check_constrained_lower(cauchy_1d, 4, 1.0, 4.0, n_paths=20_000, seed=2, agreement_sigmas=4.0)
    assert report.value("min_lower_bound") >= 0.005
    assert report.value("centred_min_lower_bound") >= 0.005
    assert report.value("center_inclusion") is True
    assert report.value("quarter_ball_epsilon") == pytest.approx(1.0)
    assert 0 < report.value("quarter_ball_probability") < 1
    assert len(report.plot_rows) == 9
    assert report.passed


def test_spacetime_exit_small_run(cauchy_1d):
    report = check_spacetime_exit(cauchy_1d, 4, 1.0, (4.0, 8.0, 16.0), n_paths=20_000, seed=5,
                                  agreement_sigmas=4.0)
    probs = report.value("probabilities")
    assert 0 < probs[-1] <= probs[0] <= 1.0
    assert abs(report.value("slope") + 1.0) <= 0.2
    assert report.value("mc_exact_agreement") is True
    assert report.passed


def test_holder_small_run(cauchy_1d):
    report = estimate_holder(cauchy_1d, (4, 8), 1.0, window=16.0)
    assert report.value("beta") > 0
    assert report.value("q_sup_rho4") > 0 and report.value("q_sup_rho8") > 0
    assert all(r >= 1.0 for r in report.value("stability_ratios"))
    assert len(report.value("stability_ratios")) == 5
    assert len(report.plot_rows) == 5
    assert report.passed
