import math
from importlib import resources

import numpy as np
import pytest

from rangeangle import experiments
from rangeangle.experiments import (
    EstimatorOptions, Scenario, associate, run_estimator, run_point_cloud, run_rmse_sweep,
    write_point_cloud_csv,
)
from rangeangle.radar import Target, TargetEstimate, synthesize_measurement
from rangeangle.scene import (
    Box, ParkingScene, SceneFileError, load_scene, parse_scene, vehicle_to_ground,
)
from rangeangle.spectral import EstimatorError

SCENE_TEXT = resources.files("rangeangle").joinpath("data/parking_scene.ini").read_text()
FAST = EstimatorOptions(range_oversample=64, angle_oversample=64)


@pytest.fixture(scope="module")
def scene():
    return load_scene()


def test_sweep_is_deterministic(cfg, two_targets):
    sc = Scenario(cfg, two_targets, [10.0], trials=3, estimators=("fft2d", "mle"), options=FAST)
    a, b = run_rmse_sweep(sc), run_rmse_sweep(sc)
    assert a.rows == b.rows
    c = run_rmse_sweep(Scenario(cfg, two_targets, [10.0], trials=3, estimators=("fft2d", "mle"),
                                seed_base=50, options=FAST))
    assert a.rows != c.rows


def test_single_noiseless_trial(cfg, single_target):
    sc = Scenario(cfg, [single_target], [300.0], trials=1, estimators=("mle",))
    row = run_rmse_sweep(sc).get("mle", 300.0)
    assert row.count == 1 and row.failures == 0
    assert row.rmse_r < 1e-6
    assert row.rmse_theta_deg < 1e-5


def test_rmse_rows_carry_crb(cfg, single_target):
    sc = Scenario(cfg, [single_target], [0.0, 20.0], trials=2, estimators=("fft2d",),
                  options=FAST)
    t = run_rmse_sweep(sc)
    lo, hi = t.get("fft2d", 0.0), t.get("fft2d", 20.0)
    assert lo.crb_r == pytest.approx(10 * hi.crb_r)
    assert all(r.rmse_r >= 0 and r.count <= 2 for r in t.rows)


def test_mle_rmse_not_below_crb(cfg, single_target):
    trials = 40
    sc = Scenario(cfg, [single_target], [10.0], trials=trials, estimators=("mle",))
    row = run_rmse_sweep(sc).get("mle", 10.0)
    band = 3.0 / math.sqrt(2 * trials)
    assert row.rmse_r >= row.crb_r * (1 - band)
    assert row.rmse_theta_deg >= row.crb_theta_deg * (1 - band)


def test_estimator_failures_are_counted(cfg, single_target, monkeypatch):
    real = experiments.run_estimator
    calls = {"n": 0}

    def flaky(name, *args, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise EstimatorError("synthetic failure")
        return real(name, *args, **kw)

    monkeypatch.setattr(experiments, "run_estimator", flaky)
    sc = Scenario(cfg, [single_target], [20.0], trials=3, estimators=("fft2d",), options=FAST)
    row = run_rmse_sweep(sc).get("fft2d", 20.0)
    assert row.failures == 1 and row.count == 2


def test_rmse_csv(cfg, single_target, tmp_path):
    sc = Scenario(cfg, [single_target], [20.0], trials=1, estimators=("fft2d",), options=FAST)
    path = tmp_path / "rmse.csv"
    run_rmse_sweep(sc).to_csv(path)
    head, row = path.read_text().splitlines()
    assert head.split(",")[:4] == ["estimator", "snr_db", "target", "rmse_r"]
    assert row.startswith("fft2d,20.0,0,")


def test_association_is_bijection(cfg):
    truths = [Target(1.0, 0.0, 3.0, -0.4), Target(1.0, 0.0, 6.0, 0.1), Target(1.0, 0.0, 8.0, 0.5)]
    ests = [TargetEstimate(1.0, 0.0, t.r + 0.01, t.theta - 0.002, 0.0, 1.0) for t in truths][::-1]
    m = associate(cfg, truths, ests)
    assert m == {0: 2, 1: 1, 2: 0}
    assert associate(cfg, truths, []) == {}


def test_association_bijective_in_trials(cfg, two_targets):
    rng = np.random.default_rng(0)
    for trial in range(5):
        z = synthesize_measurement(cfg, two_targets, 0.3, seed=trial)
        ests = run_estimator("fft2d", z, 2, FAST)
        m = associate(cfg, two_targets, ests)
        assert sorted(m.values()) == [0, 1]


def test_scenario_validation(cfg, single_target):
    with pytest.raises(ValueError):
        Scenario(cfg, [single_target], [10.0], trials=0)
    with pytest.raises(ValueError):
        Scenario(cfg, [single_target], [])
    with pytest.raises(ValueError):
        Scenario(cfg, [single_target], [10.0], estimators=("esprit",))


def test_run_estimator_unknown(cfg, single_target):
    with pytest.raises(ValueError):
        run_estimator("jafe", synthesize_measurement(cfg, [single_target], 0.0), 1)


# --------------------------------------------------------------------------
# scene and point cloud


def test_scene_contents(scene):
    assert len(scene.scatterers) == 66
    assert len(scene.mounts) == 3
    assert (scene.vehicle_width, scene.vehicle_length) == (1.8, 4.6)
    assert all((b.width, b.length) == (1.8, 4.6) for b in scene.parked)
    assert all(math.isclose(m.fov, math.radians(120.0)) for m in scene.mounts)


def test_detected_count_at_snapshot(scene):
    x, y, psi = scene.snapshot_pose
    assert len(scene.detected(np.array([x, y]), psi)) == 61


def test_exact_point_cloud_has_zero_error(scene):
    s = run_point_cloud(scene, "exact", frames=2, seed=0)
    assert (s.rmse_range, s.rmse_angle_deg) == (0.0, 0.0)
    assert s.rmse_position < 1e-12
    assert (s.detected, s.total, s.frames) == (61, 66, 2)


def test_point_cloud_reports_each_scatterer_once(scene):
    s = run_point_cloud(scene, "fft2d", seed=3, options=FAST)
    est = s.clouds[0]
    assert len(set(est.indices.tolist())) == len(est.indices) == 61
    assert s.rmse_position < 0.3


def test_point_cloud_csv(scene, tmp_path):
    s = run_point_cloud(scene, "exact")
    path = tmp_path / "pc.csv"
    write_point_cloud_csv(path, [s])
    head, row = path.read_text().splitlines()
    assert head == "estimator,rmse_range,rmse_angle_deg,rmse_position,detected,total,frames"
    assert row.startswith("exact,0.0,0.0,")


def test_box_occlusion():
    box = Box((0.0, 0.0), math.pi / 2, 1.8, 4.6)
    a = np.array([[-5.0, 0.0], [-5.0, 5.0], [-5.0, 0.0]])
    b = np.array([[5.0, 0.0], [5.0, 5.0], [-2.3, 0.0]])
    # through the body, clear of it, and ending on its face
    assert box.blocks(a, b).tolist() == [True, False, False]


def test_box_corners():
    c = Box((1.0, 2.0), math.pi / 2, 2.0, 4.0).corners()
    assert np.allclose(sorted(c[:, 0]), [0, 0, 2, 2])
    assert np.allclose(sorted(c[:, 1]), [0, 0, 4, 4])


def test_vehicle_frame_forward_axis():
    # the vehicle's forward direction is its +y axis
    assert np.allclose(vehicle_to_ground([0.0, 1.0], [0.0, 0.0], 0.3),
                       [math.cos(0.3), math.sin(0.3)])


def test_scene_rejects_unknown_keys():
    text = SCENE_TEXT
    with pytest.raises(SceneFileError, match="vehicle.colour"):
        parse_scene(text.replace("[vehicle]", "[vehicle]\ncolour = red"))
    with pytest.raises(SceneFileError, match="lacks"):
        parse_scene("[vehicle]\nwidth = 1\nlength = 2\n")


def test_scene_overrides_apply():
    text = SCENE_TEXT
    s = parse_scene(text.replace("snr_db = 20", "snr_db = 30"))
    assert isinstance(s, ParkingScene) and s.snr_db == 30.0
