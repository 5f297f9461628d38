import numpy as np
import pytest

from actorsim.calibration import CovarianceEstimate, conditional_fisher_info
from actorsim.exceptions import InvalidArgumentError, SelectionFailedError
from actorsim.mdp import ActionGrid, ConstantPolicy, RandomPolicy
from actorsim.testbeds import linear_reward
from actorsim.uncertainty import (UncertaintyEstimate, estimate_value, kl_gaussian_transitions, logmeanexp,
                                  select_calibration_action, trace_term, uncertainty_exact_oracle,
                                  uncertainty_plug_in, uncertainty_plug_in_batch, weight_hat,
                                  write_uncertainty_audit)

BETA = np.array([0.9, 0.7, 1.1])


def test_logmeanexp_stable():
    assert logmeanexp([0.0, 0.0]) == pytest.approx(0.0)
    assert logmeanexp([1000.0, 1000.0]) == pytest.approx(1000.0)
    x = np.array([[0.0, np.log(3.0)]])
    assert logmeanexp(x, axis=1)[0] == pytest.approx(np.log(2.0))


def test_kl_closed_form(linear):
    s = np.array([1.0, 2.0, -1.0])
    b2 = BETA + np.array([0.1, 0.0, -0.2])
    d = (BETA - b2) * s * 1.15
    assert kl_gaussian_transitions(s, 0.3, BETA, b2, linear) == pytest.approx(0.5 * np.sum(d**2) / 0.01)
    assert kl_gaussian_transitions(s, 0.3, BETA, BETA, linear) == 0.0
    batch = kl_gaussian_transitions(np.stack([s, 2 * s]), 0.3, BETA, b2, linear)
    assert batch[1] == pytest.approx(4 * batch[0])


def test_estimate_value_clips_and_counts(linear, rng):
    pol = ConstantPolicy(ActionGrid(), 0)
    est = estimate_value(np.ones((3, 3)), pol, linear.at(BETA), linear_reward, 4, 5, 0.9, rng, v_max=1.5)
    assert est.values.shape == (3,) and np.all(est.values <= 1.5) and est.dropped == 0
    with pytest.raises(InvalidArgumentError):
        estimate_value(np.ones((1, 3)), pol, linear.at(BETA), linear_reward, 0, 5, 0.9, rng)


def test_weight_lower_bound(linear, rng):
    # V >= 0 so w >= 2
    w = weight_hat(np.ones(3), 0.5, BETA, RandomPolicy(ActionGrid()), linear, linear_reward, rng,
                   samples=8, rollouts=2, horizon=4)
    assert w >= 2.0
    wb = weight_hat(np.ones((5, 3)), 0.5, BETA, RandomPolicy(ActionGrid()), linear, linear_reward, rng,
                    samples=4, rollouts=2, horizon=4)
    assert wb.shape == (5,) and np.all(wb >= 2.0)


def test_weight_constant_value_exact(linear, rng):
    # with zero-reward rollouts every value is 0, so w = 2 exactly
    zero = lambda s, b, n: np.zeros(np.atleast_2d(s).shape[0])  # noqa: E731
    w = weight_hat(np.ones(3), 0.5, BETA, RandomPolicy(ActionGrid()), linear, zero, rng, samples=4, rollouts=2)
    assert w == pytest.approx(2.0)


def test_trace_term_matches_manual(linear):
    s = np.array([[1.0, 2.0, 0.5]])
    cov = np.diag([0.01, 0.02, 0.03])
    info = conditional_fisher_info(s[0], 0.2, BETA, linear)
    assert trace_term(s, 0.2, BETA, cov, linear)[0] == pytest.approx(np.trace(info @ cov))
    ce = CovarianceEstimate(cov * 10, 10, "gauss-newton", 0.0)
    assert trace_term(s, 0.2, BETA, ce, linear)[0] == pytest.approx(np.trace(info @ cov))


def test_plug_in_forms_agree(linear, rng):
    s = np.array([1.0, 2.0, 0.5])
    cov = np.diag([0.01, 0.02, 0.03])
    est = uncertainty_plug_in(s, 0.2, BETA, cov, None, linear, linear_reward, rng, weight=4.0)
    assert isinstance(est, UncertaintyEstimate) and est.mode == "plug-in"
    assert est.u == pytest.approx(np.sqrt(4.0 * est.trace))
    u, w, tr = uncertainty_plug_in_batch(np.stack([s, s]), 0.2, BETA, cov, None, linear, linear_reward, rng,
                                         weights=4.0)
    assert np.allclose(u, est.u) and np.allclose(tr, est.trace)


def test_plug_in_zero_covariance_gives_zero(linear, rng):
    est = uncertainty_plug_in(np.ones(3), 0.2, BETA, np.zeros((3, 3)), None, linear, linear_reward, rng,
                              weight=3.0)
    assert est.u == 0.0


def test_oracle_zero_at_truth(linear, rng):
    est = uncertainty_exact_oracle(np.ones(3), 0.4, BETA, BETA, None, linear, linear_reward, rng)
    assert est.u == 0.0 and est.trace == 0.0


def test_oracle_with_value_function(linear, rng):
    s = np.ones(3)
    bh = BETA * 1.02
    kl = kl_gaussian_transitions(s, 0.4, BETA, bh, linear)
    est = uncertainty_exact_oracle(s, 0.4, bh, BETA, None, linear, linear_reward, rng,
                                   value_fn=lambda x: np.ones(len(x)))
    assert est.weight == pytest.approx(2 * (1 + 1.0))
    assert est.u == pytest.approx(np.sqrt(4.0 * kl))


def test_selection_picks_largest_u(linear, rng):
    grid = ActionGrid()
    cov = np.eye(3) * 1e-3
    # trace grows with (1 + gain b)^2 and the weight is pinned at 2, so b = 1 wins
    zero = lambda s, b, n: np.zeros(np.atleast_2d(s).shape[0])  # noqa: E731
    action, ests = select_calibration_action(np.ones(3), BETA, cov, RandomPolicy(grid), grid, linear, zero, rng,
                                             samples=2, rollouts=1, horizon=2)
    assert action.index == 10 and len(ests) == 11
    assert ests[10].u == max(e.u for e in ests)


def test_selection_ties_lowest_index(linear, rng):
    grid = ActionGrid()
    action, ests = select_calibration_action(np.ones(3), BETA, np.zeros((3, 3)), RandomPolicy(grid), grid,
                                             linear, linear_reward, rng)
    assert action.index == 0 and all(e.u == 0 for e in ests)


def test_selection_fails_when_all_actions_fail(linear, rng):
    grid = ActionGrid()
    nan_cov = np.full((3, 3), np.nan)
    with pytest.raises(SelectionFailedError):
        select_calibration_action(np.ones(3), BETA, nan_cov, RandomPolicy(grid), grid, linear, linear_reward, rng)


def test_audit_csv(tmp_path):
    path = tmp_path / "a.csv"
    rows = [(1, 0, UncertaintyEstimate(1.0, 2.0, 0.5, "plug-in")), (1, 1, None)]
    write_uncertainty_audit(path, rows)
    write_uncertainty_audit(path, rows, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,action_index,weight,trace,u" and len(lines) == 5
    assert lines[2] == "1,1,nan,nan,nan"
