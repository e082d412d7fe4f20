import json

import numpy as np
import pytest

from mdsaw.analysis import (
    ApertureSweep,
    FitError,
    SweepRecord,
    fit_gamma,
    linewidth_ratio,
    load_sweep_csv,
    q_from_linewidth,
    synthetic_sweep,
    write_sweep_csv,
)
from mdsaw.materials import bundled_material_path

WIDTHS = [5, 7.5, 10, 15, 20, 30, 40, 60]


def test_q_from_linewidth():
    assert q_from_linewidth(500.24e6, 18.1e3) == pytest.approx(27638, rel=1e-4)
    assert q_from_linewidth(500e6, 4.5e3) == pytest.approx(111_111, rel=1e-4)
    assert q_from_linewidth(1.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        q_from_linewidth(0.0, 1.0)
    with pytest.raises(ValueError):
        q_from_linewidth(1.0, -1.0)


def test_linewidth_ratio():
    assert linewidth_ratio(0.378, -0.95) == pytest.approx(27.56)
    assert linewidth_ratio(-0.3, -0.3) == 1.0
    assert linewidth_ratio(0.0, -0.5) == 2.0
    with pytest.raises(ValueError):
        linewidth_ratio(0.0, -1.0)


@pytest.mark.parametrize("gamma", [-0.5, -0.73, -0.95, -0.2])
@pytest.mark.parametrize("floor", [True, False])
def test_noiseless_round_trip(gamma, floor):
    fl = 1800.0 if floor else 0.0
    f = fit_gamma(synthetic_sweep(gamma, WIDTHS, floor_hz=fl), floor=floor)
    assert f.gamma == pytest.approx(gamma, rel=1e-10)
    assert f.floor_hz == pytest.approx(fl, rel=1e-8, abs=1e-6)
    assert f.branch == "upper"


def test_noisy_recovery():
    for seed in range(20):
        f = fit_gamma(synthetic_sweep(-0.80, [5, 10, 20, 30, 40], noise=0.01, seed=seed), floor=False)
        assert f.gamma == pytest.approx(-0.80, abs=0.02)
        assert f.stderr > 0


def test_scale_equivariance():
    sw = synthetic_sweep(-0.6, WIDTHS, noise=0.01, seed=3)
    a = fit_gamma(sw, floor=False)
    scaled = ApertureSweep.from_arrays(sw.widths, 3.0 * sw.kappa, sw.f0)
    b = fit_gamma(scaled, floor=False)
    assert b.abs_one_plus_gamma == pytest.approx(3.0 * a.abs_one_plus_gamma, rel=1e-12)


def test_branches():
    sw = synthetic_sweep(-0.8, WIDTHS)
    assert fit_gamma(sw, branch="lower").gamma == pytest.approx(-1.2)
    f = fit_gamma(sw, predicted_gamma=-1.3)
    assert f.branch == "lower" and f.gamma == pytest.approx(-1.2) and f.alternate_gamma == pytest.approx(-0.8)
    assert fit_gamma(sw, predicted_gamma=-0.9).branch == "upper"
    with pytest.raises(ValueError):
        fit_gamma(sw, branch="middle")


def test_exclusion_reduces_residual():
    sw = synthetic_sweep(-0.73, WIDTHS, floor_hz=1000, noise=0.005, seed=11, third_order=0.05)
    full = fit_gamma(sw)
    cut = fit_gamma(sw, exclude=[5, 7.5])
    assert cut.residual_per_dof <= full.residual_per_dof
    assert abs(cut.gamma + 0.73) < abs(full.gamma + 0.73)
    assert cut.excluded_widths == [5.0, 7.5] and 5.0 not in cut.used_widths


def test_fit_errors():
    sw = synthetic_sweep(-0.5, [10, 20, 30])
    with pytest.raises(FitError):
        fit_gamma(sw, exclude=[30])  # two records cannot support a floor fit
    assert fit_gamma(sw, floor=False).gamma == pytest.approx(-0.5)
    assert fit_gamma(sw).dof == 1
    with pytest.raises(ValueError, match="not in the sweep"):
        fit_gamma(sw, exclude=[12])
    with pytest.raises(ValueError):
        ApertureSweep([SweepRecord(-1, 1, 1)])
    with pytest.raises(ValueError):
        ApertureSweep([SweepRecord(1, 0, 1)])


def test_records_sorted_and_csv(tmp_path):
    sw = ApertureSweep([(20, 100.0, 5e8), (10, 400.0, 5e8), (15, 200.0, 5e8)])
    assert list(sw.widths) == [10, 15, 20]
    p = tmp_path / "s.csv"
    write_sweep_csv(sw, p)
    back = load_sweep_csv(p)
    assert np.array_equal(back.kappa, sw.kappa)
    bad = tmp_path / "bad.csv"
    bad.write_text("w,kappa\n1,2\n")
    with pytest.raises(ValueError, match="missing columns"):
        load_sweep_csv(bad)
    bad.write_text("w_over_lambda,kappa_i_hz,f0_hz\n1,abc,3\n")
    with pytest.raises(ValueError, match="row 2"):
        load_sweep_csv(bad)


def test_bundled_fixture_and_report(tmp_path):
    sw = load_sweep_csv(bundled_material_path("sweep_synthetic").with_suffix(".csv"))
    assert len(sw) == 8
    f = fit_gamma(sw)
    assert f.gamma == pytest.approx(-0.73, abs=0.03)
    text = f.to_json(tmp_path / "r.json", extra={"source": "fixture"})
    d = json.loads((tmp_path / "r.json").read_text())
    assert d == json.loads(text)
    assert {"gamma", "stderr", "floor_hz", "residuals_hz", "excluded_widths", "source"} <= d.keys()
