import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gammaflow import fields as fl
from gammaflow import flows as fw
from gammaflow import functionals as fn
from gammaflow import gamma as gm

SIGMA = 0.9428090415820634
TAIL_C = 0.3862943611198897           # int_0^inf (1 - tanh s)^2 ds = 2 log 2 - 1
PLAIN_TANH_DIST_EPS_01 = 0.33054582876327393  # sqrt(2 sqrt2 * 0.1 * TAIL_C)
# int_0^1 sin(x/eps) b(x) sin(pi x) dx, b the unit bump centred at 0.5 of half-width 0.3
OSC_PAIRING = {0.02: 4.72e-4, 0.01: 3.86e-5, 0.005: -9.49e-6}


def line(n=4096, extent=(-1.0, 1.0)):
    return fl.Grid(1, (n,), (extent,), 1, 1.0)


# -- sign patterns and recovery sequences --------------------------------------

def test_sign_pattern():
    p = gm.SignPattern((-0.5, 0.25), -1.0)
    x = np.array([-0.9, 0.0, 0.9])
    assert p.k == 2
    assert list(p(x)) == [-1.0, 1.0, -1.0]
    assert p.signed_distance(x) == pytest.approx([-0.4, 0.25, -0.65])
    with pytest.raises(ValueError):
        gm.SignPattern((0.3, 0.1))
    with pytest.raises(ValueError):
        gm.SignPattern((), 0.5)


def test_constant_pattern_has_zero_energy():
    g = line(256)
    for sign in (1.0, -1.0):
        u = gm.recovery_sequence(gm.SignPattern((), sign), 0.05, g)
        assert np.all(u.values == sign)
        assert fn.spatial_energy(u.values[0], g, fn.make_ginzburg_landau(0.05)) == 0.0


def test_recovery_profile_shape():
    eps = 0.02
    g = line(8192)
    u = gm.recovery_sequence(gm.SignPattern((0.0,), -1.0), eps, g).values[0, :, 0]
    x = g.axes()[0]
    ell = gm.layer_half_width(eps)
    assert np.all(np.abs(u) <= 1.0)
    assert np.all(u[x >= ell] == 1.0) and np.all(u[x <= -ell] == -1.0)
    assert np.all(np.diff(u) >= 0)
    assert ell == pytest.approx(math.sqrt(2) * eps * (0.5 * math.log(1 / eps) + 0.5))


def test_recovery_energy_converges_to_surface_tension():
    g = line(8192)
    recs = gm.recovery_sweep(gm.SignPattern((0.0,), -1.0), [0.1, 0.05, 0.025, 0.0125], g)
    errs = [r.relative_error for r in recs]
    assert errs[-1] <= 0.02
    assert np.all(np.diff(errs) < 0)
    assert recs[-1].normalized_energy == pytest.approx(SIGMA, rel=0.02)
    two = gm.recovery_sweep(gm.SignPattern((-0.4, 0.4), 1.0), [0.0125], g)[0]
    assert two.normalized_energy == pytest.approx(2 * SIGMA, rel=0.02)


def test_plain_tanh_distance_matches_oracle():
    eps = 0.1
    errs = []
    for n in (8192, 65536):
        g = line(n)
        x = g.axes()[0]
        d = np.tanh(x / (math.sqrt(2) * eps)) - np.sign(x)
        dist = math.sqrt(fl.spatial_integrate(d * d, g))
        errs.append(abs(dist - PLAIN_TANH_DIST_EPS_01) / PLAIN_TANH_DIST_EPS_01)
    # first order: the jump of sign(x) sits on a node
    assert errs[0] < 2e-3
    assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.05)
    g = line(8192)
    x = g.axes()[0]
    d = np.tanh(x / (math.sqrt(2) * eps)) - np.sign(x)
    dist = math.sqrt(fl.spatial_integrate(d * d, g))
    # the cut-off profile is closer to the sign pattern than the plain one
    rec = gm.recovery_sweep(gm.SignPattern((0.0,), -1.0), [eps], g)[0]
    assert rec.l2_distance < dist
    assert rec.l2_distance > 0.9 * dist


def test_recovery_distance_scales_like_sqrt_eps():
    g = line(8192)
    recs = gm.recovery_sweep(gm.SignPattern((0.0,), -1.0), [0.1, 0.05, 0.025, 0.0125], g)
    d = np.array([r.l2_distance for r in recs])
    ratios = d[:-1] / d[1:]
    assert np.all(np.abs(ratios - math.sqrt(2)) < 0.05)


def test_recovery_rejects_bad_input():
    g = line(512)
    with pytest.raises(ValueError, match="too close"):
        gm.recovery_sequence(gm.SignPattern((0.0, 0.1), 1.0), 0.02, g)
    with pytest.raises(ValueError):
        gm.recovery_sequence(gm.SignPattern((1.5,)), 0.02, g)
    with pytest.raises(ValueError):
        gm.recovery_sequence(gm.SignPattern((0.0,)), 0.0, g)
    with pytest.raises(ValueError):
        gm.recovery_sequence(gm.SignPattern((0.0,)), 0.02, fl.Grid(2, (8, 8), ((-1, 1), (-1, 1)), 1, 1.0))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 0.08), st.floats(-0.5, 0.5))
def test_recovery_profile_is_bounded_and_monotone(eps, c):
    g = line(2048)
    u = gm.recovery_sequence(gm.SignPattern((c,), 1.0), eps, g).values[0, :, 0]
    assert np.all(np.abs(u) <= 1.0)
    assert np.all(np.diff(u) <= 0)


# -- weak diagnostic -------------------------------------------------------

def test_weak_l1_zero_for_identical_members():
    g = line(256, (0.0, 1.0))
    v = np.sin(np.pi * g.axes()[0])
    out = gm.weak_l1_diagnostic([v, v], v, grid=g)
    assert out.shape == (2, 8)
    assert np.all(out == 0.0)


def test_weak_l1_oscillation_decay_matches_oracle():
    g = line(65536, (0.0, 1.0))
    x = g.axes()[0]
    b = np.zeros_like(x)
    inside = np.abs((x - 0.5) / 0.3) < 1
    b[inside] = np.exp(1 - 1 / (1 - ((x[inside] - 0.5) / 0.3) ** 2))
    psi = np.sin(np.pi * x)
    seq = [np.sin(x / e) * b for e in OSC_PAIRING]
    out = gm.weak_l1_diagnostic(seq, np.zeros_like(x), test_bank=[psi], grid=g)[:, 0]
    for val, (e, ref) in zip(out, OSC_PAIRING.items()):
        assert val == pytest.approx(abs(ref), rel=2e-2), e
    # strong L1 distance does not decay
    strong = [fl.spatial_integrate(np.abs(s), g) for s in seq]
    assert min(strong) > 0.5 * max(strong)


def test_weak_l1_with_phi_and_space_time_fields():
    g = fl.Grid(1, (64,), ((0.0, 1.0),), 3, 1.0)
    a = fl.SpaceTimeField.from_function(g, lambda x, t: x[..., 0])
    b = fl.SpaceTimeField.from_function(g, lambda x, t: 2 * x[..., 0])
    cube = lambda v: np.asarray(v) ** 3
    out = gm.weak_l1_diagnostic([b], a, test_bank=[np.ones((4, 65, 1))], phi=cube)
    assert out[0, 0] == pytest.approx(7 / 4, rel=1e-3)
    with pytest.raises(ValueError):
        gm.weak_l1_diagnostic([np.ones(3)], np.ones(65), grid=g)
    with pytest.raises(ValueError):
        gm.weak_l1_diagnostic([np.ones(65)], np.ones(65))


# -- sweeps -----------------------------------------------------------------

def sin_pi(x):
    return np.sin(np.pi * x[..., 0])


def test_constant_family_sweep_is_eps_independent(tmp_path):
    g = fl.Grid(1, (128,), ((0.0, 1.0),), 20, 0.02)
    cfg = gm.SweepFlowConfig(g, initial=sin_pi)
    rep = gm.run_sweep(fn.constant_filtration_family(1.0), cfg, [0.5, 0.25, 0.125], gm.BankConfig(count=16))
    vals = rep.column("functional_value")
    assert np.ptp(vals) <= 1e-12 * abs(vals[0])
    assert np.all(rep.column("strong_l2_distance") <= 1e-12)
    assert rep.limit_passed and all(r.minimality_passed for r in rep.records)
    assert rep.limit_candidate == "homogenized(a=1.0)"
    rep.write_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert tuple(rows[0]) == gm.COLUMNS and len(rows) == 3
    rep.write_summary(tmp_path / "s.json")
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["limit_verdict"] == "pass" and summary["failed_members"] == []
    paths = rep.write_plot_files(tmp_path, "s")
    assert len(paths) == len(gm.COLUMNS) - 2
    assert len((tmp_path / "s_min_slack.dat").read_text().splitlines()) == 3


def test_failed_member_is_marked_and_sweep_continues():
    g = fl.Grid(1, (64,), ((0.0, 1.0),), 10, 0.01)
    good = fw.constant(1.0)
    bad = lambda x, t: -np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(t)))
    fam = fn.FunctionalFamily(fn.FILTRATION, member_at=lambda e: fn.make_filtration(good),
                              limit_spec=fn.make_filtration(good),
                              coefficient_at=lambda e: bad if e == 0.25 else good,
                              params={"homogenized_coefficient": 1.0})
    rep = gm.run_sweep(fam, gm.SweepFlowConfig(g, initial=sin_pi), [0.5, 0.25, 0.125], gm.BankConfig(count=8))
    status = [r.complete for r in rep.records]
    assert status == [True, False, True]
    assert "positive" in rep.records[1].failed
    assert math.isnan(rep.column("functional_value")[1])
    assert rep.summary()["failed_members"] == [0.25]


def test_sweep_validates_eps_list():
    g = fl.Grid(1, (32,), ((0.0, 1.0),), 4, 0.01)
    cfg = gm.SweepFlowConfig(g, initial=sin_pi)
    fam = fn.constant_filtration_family()
    with pytest.raises(ValueError, match="decreasing"):
        gm.run_sweep(fam, cfg, [0.1, 0.2])
    with pytest.raises(ValueError):
        gm.run_sweep(fam, cfg, [])
    with pytest.raises(ValueError):
        gm.SweepFlowConfig(g, time_scale="eps")


def test_ginzburg_landau_sweep_stays_near_perimeter():
    g = fl.Grid(1, (2048,), ((-1.0, 1.0),), 5, 0.005)
    cfg = gm.SweepFlowConfig(g, substeps=4)
    rep = gm.run_sweep(fn.ginzburg_landau_family(), cfg, [0.1, 0.05, 0.025])
    assert all(r.complete and r.energy_nonincreasing for r in rep.records)
    assert np.all(np.abs(rep.column("initial_normalized") - SIGMA) <= 0.05 * SIGMA)
    assert rep.summary()["limit_verdict"] == "not_applicable"
    assert rep.limit_candidate == "sharp_interface"
    d = rep.column("strong_l2_distance")
    assert np.all(np.diff(d) < 0)


def test_homogenization_sweep_workers_match():
    g = fl.Grid(1, (256,), ((0.0, 1.0),), 10, 0.02)
    cfg = gm.SweepFlowConfig(g, initial=sin_pi)
    fam = fn.oscillating_filtration_family()
    a = gm.run_sweep(fam, cfg, [0.25, 0.125], gm.BankConfig(count=8), workers=1)
    b = gm.run_sweep(fam, cfg, [0.25, 0.125], gm.BankConfig(count=8), workers=2)
    for name in gm.COLUMNS[2:]:
        np.testing.assert_array_equal(a.column(name), b.column(name))
    rel = a.relative_distances()
    assert rel[1] < rel[0]
