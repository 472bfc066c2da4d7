import json
import math

import numpy as np
import pytest

from besselab.errors import InvalidInput, NotClosed
from besselab.formal_geodesic import ConstantRule, index_report, iterate, poincare_map
from besselab.geodesic_engine import (
    MetricSpec,
    closed_geodesic,
    detect_closure,
    extract_formal,
    initial_frame,
    integrate_geodesic,
    probe_critical_manifold,
    random_unit_initial,
    transport_frame,
)

TWO_PI = 2 * math.pi
ZOLL_H = [0.0, 0.3, 0.0, -0.3]


def zoll():
    return MetricSpec.zoll_revolution(ZOLL_H)


def test_great_circle_closes_at_two_pi():
    met = MetricSpec.round_sphere(2)
    rec = closed_geodesic(met, ([1.0, 0, 0], [0, 1.0, 0]))
    assert abs(rec.period - TWO_PI) < 1e-9
    assert rec.residual <= 1e-10


def test_flat_h_reproduces_round_paths():
    rng = np.random.default_rng(2)
    round2 = MetricSpec.round_sphere(2)
    flat = MetricSpec.zoll_revolution([0.0, 0.0, 0.0, 0.0])
    init = random_unit_initial(round2, rng)
    a = integrate_geodesic(round2, init, 5.0)
    b = integrate_geodesic(flat, init, 5.0)
    for t in (1.0, 3.3, 5.0):
        assert np.max(np.abs(a.sol(t) - b.sol(t))) < 1e-12


def test_zoll_geodesics_close_at_two_pi():
    met = zoll()
    rng = np.random.default_rng(5)
    for _ in range(8):
        rec = closed_geodesic(met, random_unit_initial(met, rng))
        assert abs(rec.period - TWO_PI) <= 1e-6
        assert rec.residual <= 1e-6
        assert rec.path.speed_drift <= 1e-9
        assert rec.path.clairaut_drift <= 1e-9


def test_spheroid_control_does_not_close():
    met = MetricSpec.spheroid(2.0)
    path = integrate_geodesic(met, random_unit_initial(met, np.random.default_rng(3)), 40.0, frame=False)
    with pytest.raises(NotClosed):
        detect_closure(path)


def test_spheroid_meridian_still_closes():
    # meridians are closed on any surface of revolution; length is the
    # perimeter of the ellipse with semi-axes 1 and 2
    met = MetricSpec.spheroid(2.0)
    rec = closed_geodesic(met, ([1.0, 0, 0], [0, 0, 1.0]), max_length=12.0)
    perimeter = 4 * 2.0 * 1.2110560275684594  # 4 a E(k^2 = 3/4), a = 2
    assert abs(rec.period - perimeter) < 1e-8


def test_round_s2_holonomy_trivial():
    met = MetricSpec.round_sphere(2)
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(1)))
    _, _, H = transport_frame(met, rec)
    assert np.allclose(H, [[1.0]], atol=1e-9)
    assert rec.frame_defect <= 1e-8


def test_round_s3_holonomy_identity():
    met = MetricSpec.round_sphere(3)
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(4)))
    _, _, H = transport_frame(met, rec)
    assert np.max(np.abs(H - np.eye(2))) < 1e-8
    assert rec.frame_defect <= 1e-8


def test_zoll_holonomy_trivial():
    met = zoll()
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(8)))
    _, _, H = transport_frame(met, rec)
    assert np.allclose(H, [[1.0]], atol=1e-8)
    assert np.max(np.abs(H.T @ H - 1)) <= 1e-8


def test_gauss_curvature_against_symbolic_values():
    # frozen from a symbolic evaluation of the Brioschi formula in (theta, phi)
    met = zoll()
    for theta, K in [(0.3, 1.4142675457636522), (1.1, 0.776154589366318), (2.5, 0.9058585250687804)]:
        assert met.gauss_curvature(math.cos(theta)) == pytest.approx(K, abs=1e-12)


def test_round_extraction_is_constant_identity():
    for n in (2, 3, 4):
        met = MetricSpec.round_sphere(n)
        rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(n)))
        fg = extract_formal(met, rec)
        rule = fg.R.segments[0].rule
        assert isinstance(rule, ConstantRule)
        assert np.max(np.abs(rule.value - np.eye(n - 1))) < 1e-9
        assert np.max(np.abs(fg.A - np.eye(n - 1))) < 1e-8


def test_zoll_equator_has_unit_curvature():
    # at z = 0 the profile is a = 1 + h(0) = 1 and K = 1 / a^2
    met = zoll()
    rec = closed_geodesic(met, ([1.0, 0, 0], [0, 1.0, 0]))
    fg = extract_formal(met, rec)
    assert isinstance(fg.R.segments[0].rule, ConstantRule)
    assert fg.R(1.0)[0, 0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_extracted_round_indices(n):
    met = MetricSpec.round_sphere(n)
    fg = extract_formal(met, closed_geodesic(met, random_unit_initial(met, np.random.default_rng(n))))
    for k in (1, 2, 3):
        r = index_report(iterate(fg, k))
        assert r.ind == (2 * k - 1) * (n - 1)
        assert r.nullity == 2 * (n - 1)
        assert r.ind % 2 == (n + 1) % 2


def test_zoll_generic_index_and_iterates():
    met = zoll()
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(9)))
    fg = extract_formal(met, rec)
    assert np.max(np.abs(poincare_map(fg).entries - np.eye(2))) < 1e-6
    for k in (1, 2, 3):
        r = index_report(iterate(fg, k), oracle=True)
        assert r.ind == 2 * k - 1 and r.nullity == 2


def test_index_does_not_depend_on_frame_choice():
    met = MetricSpec.round_sphere(3)
    init = random_unit_initial(met, np.random.default_rng(12))
    p, v = init
    F = initial_frame(met, p, v)
    s = 0.7
    F2 = F @ np.array([[math.cos(s), -math.sin(s)], [math.sin(s), math.cos(s)]])
    a = extract_formal(met, closed_geodesic(met, init))
    b = extract_formal(met, closed_geodesic(met, init, frame0=F2))
    for k in (1, 2):
        assert index_report(iterate(a, k)).ind == index_report(iterate(b, k)).ind


def test_rescaled_domain_keeps_index():
    met = zoll()
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(13)))
    fg = extract_formal(met, rec, T=math.pi)
    assert fg.T == pytest.approx(math.pi)
    r = index_report(fg)
    assert (r.ind, r.nullity) == (1, 2)


@pytest.mark.parametrize("n,dim", [(2, 3), (3, 5)])
def test_probe_round_sphere(n, dim):
    pr = probe_critical_manifold(MetricSpec.round_sphere(n), samples=2)
    assert pr.dimension == dim and not pr.degraded


def test_probe_zoll():
    pr = probe_critical_manifold(zoll(), samples=2)
    assert pr.dimension == 3 and not pr.degraded


def test_metric_validation():
    with pytest.raises(InvalidInput):
        MetricSpec.zoll_revolution([0.1, 0.3])  # not odd
    with pytest.raises(InvalidInput):
        MetricSpec.zoll_revolution([0.0, 0.5])  # h(1) != 0
    with pytest.raises(InvalidInput):
        MetricSpec.zoll_revolution([0.0, 3.0, 0.0, -3.0])  # sup |h| >= 1
    with pytest.raises(InvalidInput):
        MetricSpec.custom([-2.0])
    with pytest.raises(InvalidInput):
        MetricSpec("torus")
    with pytest.raises(InvalidInput):
        closed_geodesic(MetricSpec.round_sphere(2), ([1.0, 0, 0], [1.0, 1.0, 0]))


def test_metric_json_round_trip():
    for met in (zoll(), MetricSpec.round_sphere(4), MetricSpec.spheroid(2.0), MetricSpec.custom([0.2, 0.1])):
        back = MetricSpec.from_json(json.dumps(met.to_json()))
        assert back.family == met.family and back.n == met.n
        assert back.psi(0.3) == pytest.approx(met.psi(0.3))


def test_record_json():
    met = zoll()
    rec = closed_geodesic(met, random_unit_initial(met, np.random.default_rng(0)))
    transport_frame(met, rec)
    d = json.loads(json.dumps(rec.to_json()))
    assert d["closed"] and d["holonomy"] == [[pytest.approx(1.0)]]
