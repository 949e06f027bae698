import numpy as np
import pytest

from lpbfsim.fem import FieldState, Trajectory, uniform_field
from lpbfsim.mesh import Box, build_structured_mesh
from lpbfsim.metrics import (
    ErrorReport,
    MetricsError,
    RunLog,
    composite_sampler,
    control_temperature,
    error_metrics,
    sawtooth_fraction,
)


@pytest.fixture
def mesh2d():
    return build_structured_mesh(Box((0, 0), (1, 1)), 0.25)


def test_control_temperature_constant_field(mesh2d):
    f = uniform_field(mesh2d, 7.0)
    val = control_temperature(f, 0.99, (0.0, 1.0), 0.125)
    assert val == pytest.approx(7.0, rel=1e-12)


def test_control_temperature_linear_exact(mesh2d):
    f = FieldState(mesh2d, mesh2d.coords[:, 0].copy(), 0.0)
    val = control_temperature(f, 0.5, (0.0, 1.0), 0.125)
    assert val == pytest.approx(0.5, rel=1e-12)


def test_control_temperature_line_outside(mesh2d):
    f = uniform_field(mesh2d, 1.0)
    with pytest.raises(MetricsError):
        control_temperature(f, 1.5, (0.0, 1.0), 0.125)


def test_composite_sampler_prefers_local():
    gm = build_structured_mesh(Box((0, 0), (4, 1)), 0.25)
    lm = build_structured_mesh(Box((1, 0.5), (2, 1)), 0.25)
    gf = uniform_field(gm, 100.0)
    lf = uniform_field(lm, 200.0)
    sample = composite_sampler(lf, gf)
    vals = sample(np.array([[0.5, 0.9], [1.5, 0.9]]))
    assert vals[0] == pytest.approx(100.0)
    assert vals[1] == pytest.approx(200.0)


def make_log_and_reference(scale=1.0):
    gm = build_structured_mesh(Box((0, 0), (4, 1)), 0.25)
    lm = build_structured_mesh(Box((1, 0.5), (2, 1)), 0.25)
    ref = Trajectory(gm)
    log = RunLog()
    base = 300.0 + 50.0 * gm.coords[:, 0]
    base_l = 300.0 + 50.0 * lm.coords[:, 0]
    for k, t in enumerate((0.0, 0.1, 0.2)):
        vals = base * (1 + 0.1 * k)
        ref.append(FieldState(gm, vals, t))
        kind = "initial" if k == 0 else "macro"
        log.record(kind, t, FieldState(lm, scale * base_l * (1 + 0.1 * k), t),
                   FieldState(gm, vals, t), 0)
    return log, ref


def test_error_metrics_identical_trajectories():
    log, ref = make_log_and_reference()
    rep = error_metrics(log, ref)
    assert np.allclose(rep.rel_l2, 0.0, atol=1e-12)
    assert rep.mean_rel_l2 == pytest.approx(0.0, abs=1e-12)


def test_error_metrics_relative_scaling():
    eps = 0.03
    log, ref = make_log_and_reference(scale=1 + eps)
    rep = error_metrics(log, ref)
    # trajectory = reference * (1 + eps): every relative error equals eps
    assert np.allclose(rep.rel_l2[1:], eps, rtol=1e-10)
    assert rep.mean_rel_l2 == pytest.approx(eps, rel=1e-10)


def test_error_report_validation():
    with pytest.raises(MetricsError):
        ErrorReport(np.array([0.0, 1.0]), ["a", "b"], np.array([0.1, -0.2]),
                    np.array([1.0, 2.0]), 0.0)


def test_sawtooth_fraction_synthetic():
    times = np.arange(1, 7) * 0.1
    kinds = ["micro"] * 6
    rising = ErrorReport(times, kinds, np.array([1, 2, 3, 1, 2, 3.0]),
                         np.full(6, np.nan), 2.0)
    assert sawtooth_fraction(rising, 3) == 1.0
    mixed = ErrorReport(times, kinds, np.array([1, 2, 3, 3, 2, 4.0]),
                        np.full(6, np.nan), 2.5)
    assert sawtooth_fraction(mixed, 3) == 0.5
