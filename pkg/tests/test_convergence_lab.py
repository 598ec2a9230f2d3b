import math

import numpy as np
import pytest

from convergence_lab import (GridHierarchy, TestFunction, default_fdd_events, energy_form, energy_identity_check,
                             equicontinuity_modulus, extend, grid_embed, hypothesis_check, pair_measure_sums,
                             resolvent_sequence, restrict, run_convergence, semigroup_convergence,
                             tightness_summary, weak_form_check, write_convergence_table)
from kernel_model import LatticeSite, ModelSpec
from lattice_generator import GridFunction, build_generator, window_size_heuristic
from stable_oracle import OracleSpec
from utils import read_table


def test_grid_embed_rounds_down():
    assert grid_embed([0.7], 2) == LatticeSite((1,), 2)
    assert grid_embed([-0.3], 1) == LatticeSite((-1,), 1)
    assert grid_embed([0.5, -0.5], 4) == LatticeSite((2, -2), 4)


def test_hierarchy_validation(cauchy_1d):
    with pytest.raises(ValueError, match="strictly increasing"):
        GridHierarchy(cauchy_1d, (4, 2))
    with pytest.raises(ValueError):
        GridHierarchy(cauchy_1d, (4,))
    with pytest.raises(ValueError, match="pad_tol"):
        GridHierarchy(cauchy_1d, (2, 4), pad_tol=0.0)
    h = GridHierarchy(cauchy_1d, (2, 4), box=1.0, pad=3.0)
    assert h.window(1.0) == 4.0 and h.half_width(4, 1.0) == 16
    assert h.window(100.0) == 4.0
    assert "pad_target" not in h.describe(1.0)


def test_padding_follows_the_window_heuristic(cauchy_1d):
    light = GridHierarchy(ModelSpec(d=1, alpha=1.5), (2, 4), box=1.0, max_pad=math.inf)
    heavy = GridHierarchy(ModelSpec(d=1, alpha=0.8), (2, 4), box=1.0, max_pad=math.inf)
    assert heavy.window(1.0) > light.window(1.0)
    tight = GridHierarchy(ModelSpec(d=1, alpha=1.5), (2, 4), box=1.0, pad_tol=0.01, max_pad=math.inf)
    assert tight.window(1.0) > light.window(1.0)
    assert light.window(4.0) > light.window(1.0)
    assert light.padding(1.0) == pytest.approx(
        window_size_heuristic(1.0, 1.5, None, 0.05, 1, 2.0 * light.spec.kappa2))
    capped = GridHierarchy(cauchy_1d, (2, 4), box=1.0, max_pad=3.0)
    info = capped.describe(1.0)
    assert capped.window(1.0) == 4.0 and info["pad_capped"] and info["pad_target"] > 3.0


def test_resolvent_sequence_records_window(cauchy_1d):
    h = GridHierarchy(cauchy_1d, (2, 4), box=1.0, max_pad=3.0)
    study = resolvent_sequence(TestFunction("gaussian", 1, width=0.5, radius=1.0), 2.0, h)
    params = study.report.parameters
    assert params["window"] == 4.0 and params["horizon"] == 0.5 and params["pad_capped"]
    assert study.levels[-1].generator.n_sites == 2 * 16 + 1


def test_test_function_shapes():
    f = TestFunction("bump", 2, radius=1.0)
    assert f(np.array([[0.0, 0.0]]))[0] == pytest.approx(1.0)
    assert f(np.array([[1.0, 0.0]]))[0] == 0.0
    assert f.support() == [(-1.0, 1.0), (-1.0, 1.0)]
    with pytest.raises(ValueError):
        TestFunction("affine", 1).support()
    with pytest.raises(ValueError):
        TestFunction("sawtooth", 1)
    again = TestFunction.from_config(TestFunction("gauss_cos", 1, freq=2.0).to_config(), 1)
    assert again.freq == 2.0 and again.name == "gauss_cos"


def test_extend_interpolates_and_keeps_grid_values():
    affine = TestFunction("affine", 2, coef=(1.0, -2.0), offset=0.5)
    u = restrict(affine, 4, 1.0)
    E = extend(u)
    pts = np.array([[0.13, -0.41], [0.9, 0.2]])
    assert np.allclose(E(pts), affine(pts))
    assert E(np.array([0.25, 0.5])) == pytest.approx(0.25 - 1.0 + 0.5)
    with pytest.raises(ValueError, match="outside the covered cells"):
        E(np.array([[1.5, 0.0]]))


def test_extend_at_cell_centre_is_the_corner_average():
    u = GridFunction.from_callable(lambda p: p[:, 0] ** 2, 2, 2, 1)
    E = extend(u)
    assert E(np.array([0.25])) == pytest.approx((0.0 + 0.25) / 2)


def test_energy_identity_on_one_level(cauchy_1d):
    h = GridHierarchy(cauchy_1d, (2, 4), box=1.0, pad=3.0)
    f = TestFunction("gaussian", 1, width=0.5, radius=1.0)
    study = resolvent_sequence(f, 1.0, h, probes=np.linspace(-1, 1, 9)[:, None])
    level = study.level(4)
    report = energy_identity_check(level, 1.0)
    assert report.passed
    assert report.value("relative_gap") < 1e-8
    weak = weak_form_check(level, f, TestFunction("bump", 1, radius=1.0), 1.0, h.window(1.0 / 1.0))
    assert weak.passed
    assert study.report.value("sup_contraction") and study.report.value("l2_contraction")
    assert len(study.gaps) == 1


def test_energy_form_is_symmetric_and_nonnegative(checkerboard_1d):
    G = build_generator(checkerboard_1d, 2, window=3.0, rate_convention="form_rate")
    u = restrict(TestFunction("gaussian", 1, radius=2.0), 2, 3.0)
    v = restrict(TestFunction("bump", 1, center=(0.5,), radius=1.5), 2, 3.0)
    assert energy_form(G, u, v) == pytest.approx(energy_form(G, v, u), rel=1e-12)
    assert energy_form(G, u, u) > 0
    short = energy_form(G, u, v, lambda r: r <= 1.0)
    long = energy_form(G, u, v, lambda r: r > 1.0)
    assert short + long == pytest.approx(energy_form(G, u, v), rel=1e-10)
    with pytest.raises(ValueError, match="form_rate"):
        energy_form(build_generator(checkerboard_1d, 2, window=3.0), u, v)


def test_resolvent_gaps_shrink(cauchy_1d):
    h = GridHierarchy(cauchy_1d, (2, 4, 8), box=1.0, pad=7.0)
    study = resolvent_sequence(TestFunction("gaussian", 1, width=0.5, radius=1.0), 1.0, h)
    assert study.gaps[1] < study.gaps[0]
    modulus = equicontinuity_modulus(study, [0.5, 0.25, 0.125], probe_spacing=0.125)
    sup_omega = modulus.value("sup_omega")
    assert sup_omega == sorted(sup_omega, reverse=True)


def test_pair_sums_of_zero_function(cauchy_1d):
    zero = TestFunction("zero", 1)
    assert pair_measure_sums(cauchy_1d, 4, 4.0, zero, TestFunction("bump", 1)) == (0.0, 0.0)
    report = hypothesis_check(cauchy_1d, (4, 8), 4.0, [(zero, zero)])
    assert report.passed and report.value("gaps") == [0.0, 0.0]


def test_pair_sums_need_grid_annulus(cauchy_1d, checkerboard_1d):
    g, h = TestFunction("bump", 1), TestFunction("gaussian", 1)
    with pytest.raises(ValueError, match="annulus"):
        pair_measure_sums(cauchy_1d, 3, 4.0, g, h)
    disc, cont = pair_measure_sums(checkerboard_1d, 16, 2.0, g, h)
    assert disc == pytest.approx(cont, rel=0.1)
    with pytest.raises(ValueError, match="oracle invalid"):
        pair_measure_sums(ModelSpec(d=2, alpha=1.0, kappa1=1.0, kappa2=2.0, symbol=checkerboard_1d.symbol),
                          4, 4.0, TestFunction("bump", 2), TestFunction("gaussian", 2))


def test_hypothesis_gap_halves(cauchy_1d):
    report = hypothesis_check(cauchy_1d, (4, 8, 16))
    gaps = report.value("gaps")
    assert gaps[2] < gaps[1] < gaps[0]
    assert report.passed


def test_default_fdd_events_are_boxes():
    events = default_fdd_events(2)
    assert len(events) == 3
    b1, b2 = events[1]
    assert b1.lo == (-2.0, -2.0) and b2.lo == (0.0, -2.0)


def test_run_convergence_table(cauchy_1d, tmp_path):
    result = run_convergence(cauchy_1d, (2, 4), parts=("resolvent", "energy"), box=1.0, pad=3.0)
    names = [r.check_name for r in result.reports]
    assert names == ["resolvent_sequence", "energy_identity", "energy_identity"]
    assert [row[0] for row in result.table] == [2, 4]
    out = tmp_path / "convergence.tsv"
    write_convergence_table(result.table, str(out))
    header, rows = read_table(str(out))
    assert header == ["n", "e_n", "hypothesis_gap", "semigroup_err", "runtime"]
    assert rows[0][2] == "nan"
    with pytest.raises(ValueError, match="unknown convergence parts"):
        run_convergence(cauchy_1d, (2, 4), parts=("resolvent", "spectral"))


def test_semigroup_error_shrinks_with_the_grid(cauchy_1d):
    hierarchy = GridHierarchy(cauchy_1d, levels=(4, 8, 16), box=1.0)
    f = TestFunction("gaussian", 1, width=0.5, radius=2.0)
    report = semigroup_convergence(f, 1.0, hierarchy, window=32.0, n_paths=4000, seed=3)
    errors = report.value("sup_errors")
    assert len(errors) == 3
    assert errors[2] < errors[1] < errors[0]
    assert errors[-1] <= 0.1
    # the form-rate Cauchy chain converges to sigma = 2 pi c
    assert report.value("sigma") == pytest.approx(2 * math.pi, rel=0.02)
    assert report.value("fdd_pass") is True
    assert len(report.value("fdd_max_gap")) == 3
    assert report.plot_header == ["n", "sup_error", "fdd_max_gap"]
    assert report.passed


def test_semigroup_with_a_given_oracle(cauchy_1d):
    hierarchy = GridHierarchy(cauchy_1d, levels=(4, 16), box=1.0)
    f = TestFunction("bump", 1, radius=1.5)
    report = semigroup_convergence(f, 0.5, hierarchy, OracleSpec(1.0, 1, 2 * math.pi), window=32.0, fdd=False)
    assert report.parameters["sigma"] == pytest.approx(2 * math.pi)
    errors = report.value("sup_errors")
    assert errors[1] < errors[0] <= 0.1
    assert "fdd_pass" not in report.fitted


def test_tightness_summary_is_bounded_across_levels(cauchy_1d):
    hierarchy = GridHierarchy(cauchy_1d, levels=(4, 8, 16))
    report = tightness_summary(hierarchy, n_paths=4000, seed=8)
    moved = report.value("increment_probability")
    q99 = report.value("max_jump_q99")
    assert len(moved) == len(q99) == 3
    assert all(0.0 <= p <= 1.0 for p in moved)
    # P(|X_0.1| > 0.5) for the Cauchy limit with sigma = 2 pi
    limit = 1 - 2 / math.pi * math.atan(0.5 / (0.1 * 2 * math.pi))
    assert max(moved) - min(moved) < 0.1
    assert abs(moved[-1] - limit) < 0.05
    assert all(np.isfinite(q) and q > 0 for q in q99)
    assert max(q99) / min(q99) < 3.0
    assert not report.gated and report.passed
