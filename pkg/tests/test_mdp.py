import numpy as np
import pytest

from actorsim.exceptions import InvalidArgumentError
from actorsim.mdp import (ActionGrid, ActionValue, ConstantPolicy, Dataset, RandomPolicy, TablePolicy,
                          TransitionSample, batch_returns, discounted_return, evaluate_policy, rollout,
                          simulate_batch, write_trajectories_csv)
from actorsim.testbeds import LinearGaussianModel, TabularMDP, linear_reward


def test_default_grid():
    g = ActionGrid()
    assert len(g) == 11
    assert g[0] == ActionValue(0, 0.0) and g[10].b == 1.0
    assert [a.index for a in g] == list(range(11))
    assert g == ActionGrid(np.linspace(0, 1, 11))


def test_grid_validation():
    with pytest.raises(InvalidArgumentError):
        ActionGrid([])
    with pytest.raises(InvalidArgumentError):
        ActionGrid([0.0, 1.5])
    with pytest.raises(InvalidArgumentError):
        ActionGrid()[11]


def test_nearest_breaks_ties_low():
    g = ActionGrid([0.0, 0.5, 1.0])
    assert g.nearest(0.25) == 0
    assert list(g.nearest([0.74, 0.76, 1.0])) == [1, 2, 2]


def test_discounted_return_examples():
    assert discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)
    assert discounted_return([], 0.9) == 0.0
    assert discounted_return([2.0], 0.0) == 2.0
    with pytest.raises(InvalidArgumentError):
        discounted_return([1.0], 1.0)
    with pytest.raises(InvalidArgumentError):
        discounted_return([np.nan], 0.5)


def test_batch_returns_matches_scalar():
    r = np.arange(12.0).reshape(3, 4)
    out = batch_returns(r, 0.9)
    assert np.allclose(out, [discounted_return(row, 0.9) for row in r])


def test_transition_sample_shape_check():
    with pytest.raises(InvalidArgumentError):
        TransitionSample(np.zeros(2), ActionValue(0, 0.0), np.zeros(3))


def test_dataset_episodes_and_roundtrip(tmp_path):
    d = Dataset(2)
    d.start_episode()
    d.append([1, 2], ActionValue(0, 0.0), [3, 4])
    d.append([3, 4], ActionValue(3, 0.3), [5, 6])
    d.start_episode()
    d.start_episode()  # no empty episodes
    d.append([7, 8], ActionValue(10, 1.0), [9, 10])
    assert len(d) == 3 and d.episode_starts == [0, 2]
    assert list(d.episodes) == [0, 0, 1]
    assert list(d.action_indices) == [0, 3, 10]
    path = tmp_path / "d.csv"
    d.to_csv(path)
    back = Dataset.from_csv(path)
    assert np.array_equal(back.states, d.states)
    assert np.array_equal(back.next_states, d.next_states)
    assert np.array_equal(back.b, d.b)
    assert back.episode_starts == d.episode_starts
    sub = d.subset([False, True, True])
    assert len(sub) == 2 and sub.episode_starts == [0, 1]
    with pytest.raises(InvalidArgumentError):
        d.append([1, 2, 3], ActionValue(0, 0.0), [1, 2, 3])


def test_dataset_extend_keeps_episodes():
    a = Dataset.from_arrays(np.ones((3, 1)), [0, 0, 0], np.ones((3, 1)), episodes=[0, 0, 1])
    b = Dataset(1)
    b.extend(a)
    b.extend(a)
    assert len(b) == 6
    assert b.episode_starts == [0, 2, 3, 5]


def test_policies(rng):
    g = ActionGrid()
    s = np.zeros((500, 3))
    assert np.all(ConstantPolicy(g, 4).act(s, rng) == 4)
    counts = np.bincount(RandomPolicy(g).act(s, rng), minlength=11)
    assert counts[0] < counts[5]  # end points have half-width cells
    with pytest.raises(InvalidArgumentError):
        ConstantPolicy(g, 12)
    probs = np.array([[1.0, 0.0], [0.0, 1.0]])
    tp = TablePolicy(ActionGrid([0.0, 1.0]), probs)
    assert list(tp.act(np.array([[0.0], [1.0]]), rng)) == [0, 1]
    assert ConstantPolicy(g, 2).action(np.zeros(3), rng) == g[2]


def test_simulate_batch_shapes_and_rollout(rng):
    m = LinearGaussianModel(dim=3, noise_sd=0.1, gain=0.5)
    bm = m.at(np.full(3, 0.9))
    g = ActionGrid()
    S, A, B, R = simulate_batch(bm, RandomPolicy(g), linear_reward, np.ones((4, 3)), 5, rng)
    assert S.shape == (4, 6, 3) and A.shape == B.shape == R.shape == (4, 5)
    assert np.allclose(B, g.values[A])
    traj = rollout(bm, ConstantPolicy(g, 0), linear_reward, np.ones(3), 7, 0.9, rng)
    assert len(traj) == 7 and traj.states.shape == (8, 3)
    assert traj.discounted_return == pytest.approx(discounted_return(traj.rewards, 0.9))
    steps = list(traj.steps())
    assert len(steps) == 7 and np.array_equal(steps[1][0], traj.states[1])
    with pytest.raises(InvalidArgumentError):
        simulate_batch(bm, RandomPolicy(g), linear_reward, np.ones((1, 3)), 0, rng)


def test_evaluate_policy_matches_finite_horizon_dp():
    rng = np.random.default_rng(3)
    mdp = TabularMDP.random(4, 2, 0.8, rng)
    probs = np.array([[1.0, 0.0]] * 4)
    exact = mdp.mu0 @ mdp.finite_horizon_value(probs, 6)
    pol = TablePolicy(mdp.grid, probs)
    m, se = evaluate_policy(mdp, pol, mdp.reward_fn, mdp.initial_sampler, 20_000, 6, 0.8, rng)
    assert abs(m - exact) < 4 * se


def test_write_trajectories(tmp_path, rng):
    m = LinearGaussianModel(dim=2, noise_sd=0.1)
    traj = rollout(m.at(np.ones(2)), ConstantPolicy(ActionGrid(), 0), linear_reward, np.ones(2), 3, 0.9, rng)
    path = tmp_path / "t.csv"
    write_trajectories_csv(path, [traj, traj])
    lines = path.read_text().splitlines()
    assert len(lines) == 7 and lines[0].startswith("episode,step,s_0,s_1,action_index,b,reward")
    with pytest.raises(InvalidArgumentError):
        write_trajectories_csv(path, [])
