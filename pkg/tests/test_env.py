import json
import math

import numpy as np
import pytest

from nbvscan.camera import DEC_PSI, INC_PHI, INC_PSI, INC_THETA, CameraModel, PoseLimits, SphericalPose
from nbvscan.env import (ConfigurationError, EnvConfig, EpisodeDoneError, EpisodeLog, MultiSceneEnv, RewardParams,
                         ScanEnv, Scene, StepRecord, coverage_curve, path_length, preprocess, resize_area,
                         step_reward)
from nbvscan.housegen import HouseSpec, generate_house

from conftest import box_mesh

FAST = dict(camera=CameraModel(64, 64, 60), n_gt=2000)


@pytest.fixture(scope="module")
def scene():
    return Scene(generate_house(HouseSpec()), EnvConfig(**FAST), "house")


def _env(scene, **kw):
    return ScanEnv(EnvConfig(**{**FAST, **kw}), scene)


def test_preprocess_identity_stack():
    frames = [np.full((84, 84), i / 10) for i in range(6)]
    s = preprocess(frames)
    assert s.shape == (84, 84, 6) and s.dtype == np.float32
    for i in range(6):
        np.testing.assert_array_equal(s[..., i], np.float32(i / 10))


def test_preprocess_constant_downsample():
    s = preprocess([np.full((168, 168), 0.5)] * 6)
    np.testing.assert_allclose(s, 0.5, atol=1e-7)


def test_preprocess_single_frame_and_mismatch():
    assert preprocess([np.zeros((100, 90))]).shape == (84, 84, 1)
    with pytest.raises(ValueError):
        preprocess([np.zeros((84, 84)), np.zeros((80, 84))])


def test_area_resize_preserves_mean():
    img = np.random.default_rng(0).uniform(size=(128, 128))
    assert resize_area(img).mean() == pytest.approx(img.mean(), rel=1e-12)
    # 2x block averaging is exact
    small = resize_area(img, 64)
    np.testing.assert_allclose(small, img.reshape(64, 2, 64, 2).mean(axis=(1, 3)), atol=1e-12)


def test_reward_examples():
    p = RewardParams()
    assert step_reward(10.0, 25.0, 50.0, p) == (pytest.approx(7.5, abs=1e-12), False)
    assert step_reward(0.0, 0.0, 50.0, p) == (-2.0, False)
    assert step_reward(3.0, 40.0, 96.5, p) == (100.0, True)
    # strictly greater than the terminal level
    assert step_reward(3.0, 0.0, 96.0, p)[1] is False
    with pytest.raises(ValueError):
        RewardParams(terminal_coverage=0.0)


def _log(*dx):
    return EpisodeLog([StepRecord(i + 1, 0, 45, 100, 0, 0.0, 0.0, d, False) for i, d in enumerate(dx)])


def test_path_length_examples(scene):
    env = _env(scene)
    env.reset()
    env.step(DEC_PSI)
    assert path_length(env.log) == pytest.approx(25.0, abs=1e-9)
    env.step(INC_THETA)
    chord = 2 * 100 * math.cos(math.radians(45)) * math.sin(math.radians(22.5))
    assert env.log.records[-1].dx == pytest.approx(chord, abs=1e-9)
    assert chord == pytest.approx(54.12, abs=5e-3)
    assert path_length(_log()) == 0.0


def test_clamped_move_costs_step_penalty(scene):
    env = _env(scene)
    env.reset()
    _, r, _, info = env.step(INC_PSI)       # already at the farthest distance
    assert info["clamped"] and info["dx"] == 0.0 and info["delta_coverage"] == 0.0
    assert r == -2.0


def test_reset_state_and_determinism(scene):
    env = _env(scene)
    s1, info = env.reset()
    assert s1.shape == (84, 84, 6)
    assert 0.0 <= s1.min() and s1.max() <= 1.0
    assert info["coverage"] > 0
    assert info["pose"] == SphericalPose(0.0, 45.0, 125.0)
    for j in range(1, 6):
        np.testing.assert_array_equal(s1[..., 0], s1[..., j])
    s2, _ = _env(scene).reset()
    np.testing.assert_array_equal(s1, s2)


def test_frame_stack_is_newest_first(scene):
    env = _env(scene)
    s0, _ = env.reset()
    s1, *_ = env.step(INC_THETA)
    s2, *_ = env.step(INC_THETA)
    np.testing.assert_array_equal(s2[..., 1], s1[..., 0])
    np.testing.assert_array_equal(s2[..., 2], s0[..., 0])
    assert not np.array_equal(s2[..., 0], s1[..., 0])


def test_episode_invariants(scene, tmp_path):
    env = _env(scene, max_steps=12)
    env.reset()
    rng = np.random.default_rng(3)
    prev = env.coverage
    done = False
    while not done:
        _, r, done, info = env.step(int(rng.integers(6)))
        assert info["coverage"] >= prev
        if not info["terminal"]:
            assert r == 1.0 * info["delta_coverage"] - 0.02 * info["dx"] - 2.0
        prev = info["coverage"]
    assert info["truncated"] and env.log.steps == 12 and not env.log.solved
    with pytest.raises(EpisodeDoneError):
        env.step(0)
    env.log.write(tmp_path / "ep.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "ep.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"t", "theta", "phi", "psi", "action", "reward", "coverage", "dx", "clamped"}
    assert set(rows[-1]) == {"steps", "distance", "coverage", "solved"}
    assert rows[-1]["steps"] == 12
    assert rows[-1]["distance"] == pytest.approx(sum(r["dx"] for r in rows[:-1]))
    back = EpisodeLog.read(tmp_path / "ep.jsonl")
    assert back.to_jsonl() == env.log.to_jsonl()


def test_terminal_bonus_once(scene):
    env = _env(scene, reward=RewardParams(terminal_coverage=30.0))
    env.reset()
    rewards = []
    done = False
    while not done:
        _, r, done, info = env.step(INC_THETA)
        rewards.append(r)
    assert info["terminal"] and env.log.solved
    assert rewards.count(100.0) == 1 and rewards[-1] == 100.0


def test_same_actions_same_log(scene):
    actions = [INC_THETA, DEC_PSI, INC_PHI, INC_THETA, 1, 3]
    logs = []
    for _ in range(2):
        env = _env(scene)
        env.reset()
        for a in actions:
            env.step(a)
        logs.append(env.log.to_jsonl())
    assert logs[0] == logs[1]


def test_house_too_big():
    big = box_mesh((-80, -80, 0), (80, 80, 50))
    with pytest.raises(ConfigurationError):
        Scene(big, EnvConfig(**FAST))


def test_continuous_env(scene):
    cfg = EnvConfig(**FAST, limits=PoseLimits(psi_min=100, psi_max=150), continuous=True)
    env = ScanEnv(cfg, Scene(scene.mesh, cfg))
    env.reset()
    _, _, _, info = env.step(np.array([10.0, 0.0, -10.0]))
    assert env.pose.theta == pytest.approx(10.0) and env.pose.psi == pytest.approx(140.0)
    assert env.log.records[0].action == [10.0, 0.0, -10.0]


def test_multi_scene_env_draws_scenes():
    cfg = EnvConfig(**FAST)
    scenes = [Scene(box_mesh((-10, -10, 0), (10, 10, h)), cfg, f"box{h}") for h in (10, 20, 30)]
    env = MultiSceneEnv(cfg, scenes)
    names = {env.reset()[1]["scene"] for _ in range(12)}
    assert len(names) > 1


def test_config_roundtrip():
    cfg = EnvConfig(limits=PoseLimits.discrete(3, 22.5), reward=RewardParams(terminal_coverage=90.0))
    assert EnvConfig.from_dict(cfg.to_dict()) == cfg
    assert EnvConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_coverage_curve_carries_forward():
    a = EpisodeLog([StepRecord(1, 0, 0, 0, 0, 0, 10.0, 0, False), StepRecord(2, 0, 0, 0, 0, 0, 30.0, 0, False)])
    b = EpisodeLog([StepRecord(1, 0, 0, 0, 0, 0, 20.0, 0, False)])
    assert coverage_curve([a]) == [10.0, 30.0]
    assert coverage_curve([a, a]) == [10.0, 30.0]
    assert coverage_curve([a, b]) == [15.0, 25.0]
