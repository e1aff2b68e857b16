import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isodream import env as E
from isodream.diffcore import ContractViolation

CFG = E.EnvConfig()
GOLDEN = json.loads((Path(__file__).parent / "golden" / "reset_seed7.json").read_text())


def _state(agent=(0.5, 0.5), balls=(), vels=(), t=0):
    return E.EnvState(agent, (0.0, 0.0), tuple(balls), tuple(vels), t, 0)


def test_reset_deterministic():
    a, b = E.reset(CFG, 3), E.reset(CFG, 3)
    assert a[0] == b[0]
    assert np.array_equal(a[1].image, b[1].image)
    assert a[0].agent_pos == (0.1, 0.5)


def test_reset_no_balls():
    _, obs = E.reset(replace(CFG, n_balls=0), 1)
    assert not obs.ball_mask.any()


def test_reset_seed7_golden():
    state, obs = E.reset(CFG, 7)
    assert [list(p) for p in state.ball_pos] == GOLDEN["ball_pos"]
    assert [list(v) for v in state.ball_vel] == GOLDEN["ball_vel"]
    assert hashlib.sha256(obs.image.tobytes()).hexdigest() == GOLDEN["image_sha256"]


def test_reset_follows_documented_stream():
    # independent replay: rejection-sample positions, then a uniform heading, per ball
    rng = np.random.default_rng(7)
    lo, hi = CFG.ball_radius, 1 - CFG.ball_radius
    expected = []
    for _ in range(CFG.n_balls):
        while True:
            p = rng.uniform(lo, hi, 2)
            if np.hypot(p[0] - 0.1, p[1] - 0.5) > 2 * CFG.deflect_radius:
                break
        rng.uniform(0, 2 * np.pi)
        expected.append(p.tolist())
    assert expected == GOLDEN["ball_pos"]


def test_trajectory_golden():
    state, _ = E.reset(CFG, 7)
    rng = np.random.default_rng(0)
    h = hashlib.sha256()
    for _ in range(200):
        r = E.step(CFG, state, rng.uniform(-1, 1, 2))
        state = r.state
        h.update(r.obs.image.tobytes())
        h.update(np.float64(r.reward).tobytes())
    assert h.hexdigest() == GOLDEN["trajectory_sha256"]


@pytest.mark.parametrize("action,reward", [((1, 0), 0.05), ((0, 1), -0.05), ((-1, 0), 0.0),
                                           ((0.5, -0.5), 0.025 - 0.025)])
def test_reward_examples(action, reward):
    r = E.step(CFG, _state(), action)
    assert r.reward == pytest.approx(reward, abs=1e-12)


def test_collision_penalty_and_flag():
    s = _state(balls=[(0.55, 0.5)], vels=[(0.0, 0.0)])
    r = E.step(replace(CFG, ball_speed=0.0), s, (0, 0))
    assert r.obs.collision and r.reward == pytest.approx(-1.0)


def test_wall_reflection():
    hi = 1 - CFG.ball_radius
    v = CFG.ball_speed
    r = E.step(CFG, _state(agent=(0.1, 0.1), balls=[(hi, 0.5)], vels=[(v, 0.0)]), (0, 0))
    assert r.state.ball_vel[0] == (-v, 0.0)
    assert r.state.ball_pos[0][0] == pytest.approx(hi - v)
    lo = CFG.ball_radius
    r = E.step(CFG, _state(agent=(0.9, 0.9), balls=[(0.5, lo + 0.01)], vels=[(0.0, -v)]), (0, 0))
    assert r.state.ball_vel[0] == (0.0, v)
    assert r.state.ball_pos[0][1] == pytest.approx(lo + 0.02)


def test_deflection_direction():
    s = _state(agent=(0.5, 0.5), balls=[(0.58, 0.5)], vels=[(-0.03, 0.0)])
    r = E.step(CFG, s, (0, 0))
    vx, vy = r.state.ball_vel[0]
    assert vx == pytest.approx(CFG.ball_speed) and vy == pytest.approx(0.0)


def test_step_done_and_after_done():
    cfg = replace(CFG, episode_length=3)
    state, _ = E.reset(cfg, 0)
    dones = []
    for _ in range(3):
        r = E.step(cfg, state, (0, 0))
        state = r.state
        dones.append(r.done)
    assert dones == [False, False, True]
    with pytest.raises(ContractViolation):
        E.step(cfg, state, (0, 0))


def test_actions_are_clipped():
    a = E.step(CFG, _state(), (5, 0)).state.agent_pos
    b = E.step(CFG, _state(), (1, 0)).state.agent_pos
    assert a == b


def test_render_agent_only_matches_mask():
    cfg = replace(CFG, n_balls=0)
    state = _state(agent=(0.37, 0.61))
    obs = E.observe(cfg, state, False)
    changed = np.any(obs.image != E.background(), -1)
    assert np.array_equal(changed, obs.agent_mask)
    assert np.array_equal(E.render(cfg, state), E.render(cfg, state))


def _brute_disk(center, radius):
    mask = np.zeros((32, 32), bool)
    ties = np.zeros((32, 32), bool)
    for i in range(32):
        for j in range(32):
            d2 = ((j + 0.5) / 32 - center[0]) ** 2 + ((i + 0.5) / 32 - center[1]) ** 2
            mask[i, j] = d2 <= radius ** 2
            ties[i, j] = abs(np.sqrt(d2) - radius) < 1e-3
    return mask, ties


def test_disk_matches_brute_force_rasterization():
    rng = np.random.default_rng(0)
    centers = [(0.1, 0.5), (0.5, 0.5)] + [tuple(rng.uniform(0.06, 0.94, 2)) for _ in range(20)]
    for c in centers:
        want, ties = _brute_disk(c, 0.06)
        got = E.disk_mask(c, 0.06)
        assert np.array_equal(got[~ties], want[~ties])
    want, _ = _brute_disk((0.5, 0.5), 0.06)
    assert E.disk_mask((0.5, 0.5), 0.06).sum() == want.sum() == 12


def test_ground_truth_event_examples():
    assert not E.ground_truth_event(CFG, _state(balls=[(0.9, 0.9)], vels=[(0, 0)]), (0, 0))
    assert E.ground_truth_event(CFG, _state(balls=[(0.5, 0.5)], vels=[(0, 0)]), (0, 0))


def test_event_boundary_at_deflect_radius():
    cfg = replace(CFG, ball_speed=0.0)
    rho = cfg.deflect_radius
    for d in np.linspace(0.5 * rho, 1.5 * rho, 41).tolist() + [rho * (1 - 1e-9), rho * (1 + 1e-9)]:
        s = _state(agent=(0.4, 0.5), balls=[(0.4 + d, 0.5)], vels=[(0.0, 0.0)])
        assert E.ground_truth_event(cfg, s, (0, 0)) == (d < rho)


def test_episode_file_roundtrip(tmp_path):
    from isodream.trainer import rollout
    ep = rollout(CFG, 4)
    E.save_episode(tmp_path / "e.isodep", ep)
    blob = (tmp_path / "e.isodep").read_bytes()
    assert blob[:7] == b"ISODEP1"
    back = E.load_episode(tmp_path / "e.isodep")
    for k in ("images", "actions", "rewards", "dones", "collisions", "agent_masks", "ball_masks"):
        assert np.array_equal(getattr(back, k), getattr(ep, k))
    assert back.config_hash == CFG.digest()
    (tmp_path / "t.isodep").write_bytes(blob[:-100])
    with pytest.raises(ContractViolation):
        E.load_episode(tmp_path / "t.isodep")


def test_variant_only_recolours_agent():
    v = E.variant(CFG)
    assert v.agent_color != CFG.agent_color
    assert replace(v, agent_color=CFG.agent_color) == CFG


def test_config_validation():
    with pytest.raises(ContractViolation):
        E.EnvConfig(agent_radius=0.3)
    with pytest.raises(ContractViolation):
        E.EnvConfig(ball_speed=0.2)
    with pytest.raises(ContractViolation):
        E.EnvConfig(dt=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.integers(0, 2**31))
def test_dynamics_invariants(seed, n_balls, action_seed):
    cfg = replace(CFG, n_balls=n_balls, episode_length=60)
    state, obs = E.reset(cfg, seed)
    rng = np.random.default_rng(action_seed)
    lo_r = -cfg.collision_penalty - cfg.lateral_penalty * cfg.dt
    for t in range(cfg.episode_length):
        a = rng.uniform(-1.2, 1.2, 2)
        predicted = E.ground_truth_event(cfg, state, a)
        r = E.step(cfg, state, a)
        assert r.obs.collision == predicted
        assert lo_r - 1e-12 <= r.reward <= cfg.dt + 1e-12
        assert r.done == (r.state.t == cfg.episode_length)
        for v in r.state.ball_vel:
            assert abs(np.hypot(*v) - cfg.ball_speed) < 1e-9
        for p in r.state.ball_pos + (r.state.agent_pos,):
            assert 0 <= p[0] <= 1 and 0 <= p[1] <= 1
        assert not (r.obs.agent_mask & r.obs.ball_mask).any()
        assert r.obs.image.min() >= 0 and r.obs.image.max() <= 1
        state = r.state


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_same_seed_and_actions_identical_trajectory(seed):
    from isodream.trainer import rollout
    a, b = rollout(CFG, seed), rollout(CFG, seed)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.rewards.tobytes() == b.rewards.tobytes()
