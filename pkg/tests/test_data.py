"""Datasets: return-to-go, normalization, windows, noise injection, the toy
environments, dataset generation, and the JSONL format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgdm import data as dsets
from mgdm.data import (
    DatasetStats,
    MalformedLineError,
    NonFiniteValueError,
    RaggedArrayError,
    Trajectory,
    compute_rtg,
    compute_stats,
    gen_dataset,
    inject_action_noise,
    load_trajectories,
    sample_window,
    save_trajectories,
)
from mgdm.envs import (
    DAMPED_CHAIN,
    POINT_MASS,
    ToyEnv,
    env_reset,
    env_step,
    expert_action,
    run_episode,
)

RNG = np.random.default_rng(31)


def toy_traj(t=6, s=3, a=2, rng=None):
    rng = rng or RNG
    return Trajectory(
        states=rng.normal(size=(t, s)),
        actions=rng.uniform(-1, 1, (t, a)),
        rewards=rng.normal(size=t),
    )


# -- return-to-go -------------------------------------------------------------


def test_rtg_examples():
    assert np.array_equal(compute_rtg([1.0, 2.0, 3.0]), [6.0, 5.0, 3.0])
    assert compute_rtg([]).shape == (0,)
    assert np.array_equal(compute_rtg([0.0, 0.0]), [0.0, 0.0])


@given(st.lists(st.floats(min_value=-10, max_value=10, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_rtg_suffix_recurrence(rewards):
    rtgs = compute_rtg(rewards)
    ext = np.append(rtgs, 0.0)
    for t in range(len(rewards)):
        assert ext[t] == rewards[t] + ext[t + 1]


# -- stats and windows ----------------------------------------------------------


def test_stats_floor_and_inverse():
    ds = [Trajectory(states=np.ones((4, 2)), actions=np.zeros((4, 1)), rewards=np.zeros(4))]
    stats = compute_stats(ds)
    assert np.all(stats.state_std == 1e-6)  # constant column floored
    x = RNG.normal(size=(5, 2))
    assert np.allclose(stats.denormalize_state(stats.normalize_state(x)), x, atol=1e-12)


def test_normalized_dataset_is_centered():
    ds = [toy_traj(t=40) for _ in range(5)]
    stats = compute_stats(ds)
    normed = np.concatenate([stats.normalize_state(t.states) for t in ds])
    assert np.max(np.abs(normed.mean(axis=0))) < 1e-9


def test_sample_window_padding():
    traj = toy_traj(t=6)
    stats = compute_stats([traj])
    w = sample_window(traj, t=0, length=4, stats=stats)
    assert w.pad.tolist() == [True, True, True, False]
    assert np.all(w.states[:3] == 0.0)
    assert np.array_equal(w.timesteps[3:], [0])

    w2 = sample_window(traj, t=5, length=4, stats=stats)
    assert not w2.pad.any()
    assert np.array_equal(w2.timesteps, [2, 3, 4, 5])
    assert np.array_equal(w2.target_action, traj.actions[5])

    with pytest.raises(IndexError):
        sample_window(traj, t=6, length=4, stats=stats)


def test_sample_window_contents_scaled():
    traj = toy_traj(t=5)
    stats = compute_stats([traj])
    w = sample_window(traj, t=4, length=3, stats=stats)
    assert np.allclose(w.rtgs[:, 0], traj.rtgs[2:5] / stats.rtg_scale)
    assert np.allclose(w.states, stats.normalize_state(traj.states[2:5]))
    assert np.allclose(w.actions, traj.actions[2:5])  # unnormalized


def test_sample_window_next_targets():
    traj = toy_traj(t=4)
    stats = compute_stats([traj])
    w = sample_window(traj, t=3, length=4, stats=stats)
    # last step has no successor
    assert w.next_valid.tolist() == [True, True, True, False]
    assert np.allclose(w.next_states[0], stats.normalize_state(traj.states[1]))
    assert np.allclose(w.next_rtgs[2, 0], traj.rtgs[3] / stats.rtg_scale)


# -- noise injection --------------------------------------------------------------


def test_noise_identity_cases():
    ds = [toy_traj() for _ in range(3)]
    out, rec = inject_action_noise(ds, fraction=0.0, magnitude=1.0, seed=0)
    assert rec.indices == []
    for a, b in zip(ds, out):
        assert np.array_equal(a.actions, b.actions)

    out, rec = inject_action_noise(ds, fraction=1.0, magnitude=0.0, seed=0)
    assert len(rec.indices) == sum(len(t) for t in ds)
    for a, b in zip(ds, out):
        assert np.allclose(a.actions, b.actions)  # zero-magnitude noise


def test_noise_exact_count_and_recorded_indices():
    ds = [toy_traj(t=10) for _ in range(4)]
    out, rec = inject_action_noise(ds, fraction=0.25, magnitude=0.7, seed=3)
    assert len(rec.indices) == round(0.25 * 40)
    changed = set()
    for ep in range(4):
        for t in range(10):
            if not np.array_equal(ds[ep].actions[t], out[ep].actions[t]):
                changed.add((ep, t))
    assert changed <= set(rec.indices)  # corrupted only the recorded set
    for (ep, t), clean in zip(rec.indices, rec.clean_actions):
        assert np.array_equal(clean, ds[ep].actions[t])
    # originals untouched, replacement clipped
    assert all(np.all(np.abs(t.actions) <= 1.0) for t in out)


def test_noise_is_seed_deterministic():
    ds = [toy_traj(t=8) for _ in range(3)]
    _, r1 = inject_action_noise(ds, 0.5, 0.3, seed=11)
    _, r2 = inject_action_noise(ds, 0.5, 0.3, seed=11)
    _, r3 = inject_action_noise(ds, 0.5, 0.3, seed=12)
    assert r1.indices == r2.indices
    assert r1.indices != r3.indices


def test_noise_rejects_bad_fraction():
    with pytest.raises(ValueError):
        inject_action_noise([toy_traj()], 1.5, 0.1, seed=0)


# -- environments -------------------------------------------------------------------


def test_point_mass_fixed_point():
    env = ToyEnv(kind=POINT_MASS)
    state = np.array([0.0, 0.0, 0.0, 0.0])  # at goal, at rest
    nxt, reward, done = env_step(env, state, np.zeros(2), t=0)
    assert reward == 0.0
    assert np.array_equal(nxt, state)
    assert not done


def test_point_mass_zero_action_from_rest_keeps_position():
    env = ToyEnv(kind=POINT_MASS)
    state = np.array([0.4, -0.2, 0.0, 0.0])
    nxt, _, _ = env_step(env, state, np.zeros(2), t=0)
    assert np.array_equal(nxt[:2], state[:2])


def test_point_mass_horizon():
    env = ToyEnv(kind=POINT_MASS)
    assert env_step(env, np.zeros(4), np.zeros(2), t=58)[2] is False
    assert env_step(env, np.zeros(4), np.zeros(2), t=59)[2] is True


def test_env_rejects_non_finite_action():
    env = ToyEnv(kind=POINT_MASS)
    with pytest.raises(ValueError):
        env_step(env, np.zeros(4), np.array([np.nan, 0.0]), t=0)


def test_expert_reaches_goal_from_grid():
    env = ToyEnv(kind=POINT_MASS)
    for px in np.linspace(-1, 1, 5):
        for py in np.linspace(-1, 1, 5):
            state = np.array([px, py, 0.0, 0.0])
            best = np.inf
            for t in range(env.horizon):
                state, _, _ = env_step(env, state, expert_action(env, state), t)
                best = min(best, float(np.linalg.norm(state[:2] - np.asarray(env.goal))))
            assert best < 0.05, (px, py, best)


def test_chain_env_decays_to_origin_under_expert():
    env = ToyEnv(kind=DAMPED_CHAIN)
    state = env_reset(env, np.random.default_rng(0))
    for t in range(env.horizon):
        state, _, _ = env_step(env, state, expert_action(env, state), t)
    assert np.linalg.norm(state) < 0.05


def test_episodes_are_bitwise_deterministic():
    env = ToyEnv(kind=POINT_MASS)
    pol = lambda s, t: expert_action(env, s)
    s1, a1, r1 = run_episode(env, pol, np.random.default_rng(123))
    s2, a2, r2 = run_episode(env, pol, np.random.default_rng(123))
    assert s1.tobytes() == s2.tobytes()
    assert a1.tobytes() == a2.tobytes()
    assert r1.tobytes() == r2.tobytes()
    assert len(r1) == env.horizon


# -- dataset generation ----------------------------------------------------------


def test_expert_dataset_scores_at_anchor():
    env = ToyEnv(kind=POINT_MASS)
    ds, stats = gen_dataset(env, "expert", n_episodes=30, seed=5)
    assert len(ds) == 30
    mean_ret = np.mean([t.episode_return for t in ds])
    norm = 100.0 * (mean_ret - stats.random_score) / (stats.expert_score - stats.random_score)
    assert norm >= 95.0
    assert stats.expert_score == pytest.approx(mean_ret)


def test_medium_dataset_in_calibration_band():
    env = ToyEnv(kind=POINT_MASS)
    ds, stats = gen_dataset(env, "medium", n_episodes=60, seed=6)
    mean_ret = np.mean([t.episode_return for t in ds])
    norm = 100.0 * (mean_ret - stats.random_score) / (stats.expert_score - stats.random_score)
    assert 20.0 <= norm <= 45.0, norm


def test_replay_mix_alternates_quality():
    env = ToyEnv(kind=POINT_MASS)
    ds, _ = gen_dataset(env, "replay-mix", n_episodes=10, seed=7)
    medium = [t.episode_return for t in ds[::2]]
    rand = [t.episode_return for t in ds[1::2]]
    assert np.mean(medium) > np.mean(rand)


def test_gen_dataset_rejects_unknown_behavior():
    with pytest.raises(ValueError):
        gen_dataset(ToyEnv(), "sloppy", 3, 0)


def test_same_seed_byte_identical_file(tmp_path):
    env = ToyEnv(kind=POINT_MASS)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (p1, p2):
        ds, _ = gen_dataset(env, "medium", n_episodes=4, seed=9)
        save_trajectories(ds, p)
    assert p1.read_bytes() == p2.read_bytes()


# -- JSONL format ------------------------------------------------------------------


def test_jsonl_roundtrip_exact(tmp_path):
    ds = [toy_traj(t=int(RNG.integers(1, 9))) for _ in range(5)]
    path = tmp_path / "ds.jsonl"
    save_trajectories(ds, path)
    back = load_trajectories(path)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.rtgs, b.rtgs)
        assert a.terminal == b.terminal


def test_jsonl_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_trajectories(path) == []


def test_jsonl_malformed_line_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    save_trajectories([toy_traj(t=2)], path)
    with path.open("a") as fh:
        fh.write("{not json\n")
    with pytest.raises(MalformedLineError, match=":2:"):
        load_trajectories(path)


def test_jsonl_ragged_states_names_line(tmp_path):
    path = tmp_path / "ragged.jsonl"
    path.write_text(
        '{"states": [[1.0, 2.0], [3.0]], "actions": [[0.1], [0.2]], '
        '"rewards": [0.5, 0.5], "terminal": true}\n'
    )
    with pytest.raises(RaggedArrayError, match=":1:"):
        load_trajectories(path)


def test_jsonl_non_finite_names_line(tmp_path):
    path = tmp_path / "inf.jsonl"
    path.write_text(
        '{"states": [[1.0, 2.0]], "actions": [[Infinity]], '
        '"rewards": [0.5], "terminal": true}\n'
    )
    with pytest.raises(NonFiniteValueError, match=":1:"):
        load_trajectories(path)


def test_jsonl_length_mismatch_is_ragged(tmp_path):
    path = tmp_path / "mismatch.jsonl"
    path.write_text(
        '{"states": [[1.0, 2.0], [1.0, 2.0]], "actions": [[0.1]], '
        '"rewards": [0.5, 0.1], "terminal": false}\n'
    )
    with pytest.raises(RaggedArrayError):
        load_trajectories(path)


def test_stats_sidecar_roundtrip(tmp_path):
    ds = [toy_traj() for _ in range(3)]
    stats = compute_stats(ds)
    stats.expert_score = -8.25
    stats.random_score = -50.0
    p = tmp_path / "x.stats.json"
    dsets.save_stats(stats, p)
    back = dsets.load_stats(p)
    assert np.array_equal(back.state_mean, stats.state_mean)
    assert np.array_equal(back.state_std, stats.state_std)
    assert back.rtg_scale == stats.rtg_scale
    assert back.expert_score == stats.expert_score
    assert back.max_return == stats.max_return
