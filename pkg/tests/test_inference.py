import math
from dataclasses import replace

import numpy as np
import pytest

from mrCore.inference import (
    ReturnDistribution, SearchConfig, SearchError, SessionHistory, act, estimate_max_returns,
    expert_posterior, history_grid, sample_expert_return, select_action_from_logits,
    select_history_length
)
from mrCore.model import init_model


def _history(state_dim, steps, seed=0):
    rng = np.random.default_rng(seed)
    history = SessionHistory(state_dim)
    for _ in range(steps):
        history.record(rng.normal(size=state_dim), int(rng.integers(4)), float(rng.uniform(0, 3)),
                       float(rng.uniform(0, 10)))
    return history


@pytest.fixture
def long_model(tiny_cfg):
    return init_model(replace(tiny_cfg, T_max=20), seed=0).eval()


def test_history_grid():
    assert history_grid(20, 2, 20) == [1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 20]
    assert history_grid(5, 2, 20) == [1, 3, 5]
    assert history_grid(4, 2, 20) == [1, 3, 4]
    assert history_grid(30, 5, 20) == [1, 6, 11, 16, 20]
    assert history_grid(1, 3, 20) == [1]
    with pytest.raises(SearchError):
        history_grid(0, 1, 20)


def test_search_config_validation():
    with pytest.raises(SearchError):
        SearchConfig(delta=0)
    with pytest.raises(SearchError):
        SearchConfig(delta=21, T_max=20)
    with pytest.raises(SearchError):
        SearchConfig(tie_break="middle")
    with pytest.raises(SearchError):
        SearchConfig(action_mode="beam")


def test_select_history_length_ties():
    estimates = [(1, 1.0), (3, 0.97), (5, 0.5)]
    assert select_history_length(estimates, "longest", 0.05) == 3
    assert select_history_length(estimates, "shortest", 0.05) == 1
    assert select_history_length(estimates, "longest", 0.0) == 1
    assert select_history_length([(2, 0.3), (4, 0.3)], "longest") == 4
    with pytest.raises(SearchError):
        select_history_length([])


def test_expert_posterior_closed_form():
    dist = ReturnDistribution([-0.5, 0.5, 1.5], [0.5, 0.5])
    post = expert_posterior(dist, 10.0)
    assert post[1] == pytest.approx(math.exp(10) / (1 + math.exp(10)), abs=1e-12)


def test_expert_sampling_frequency():
    dist = ReturnDistribution([-0.5, 0.5, 1.5], [0.5, 0.5])
    draws = sample_expert_return(dist, 10.0, np.random.default_rng(0), size=100000)
    assert abs(draws.mean() - math.exp(10) / (1 + math.exp(10))) < 0.001


def test_zero_kappa_is_prior():
    dist = ReturnDistribution([0.0, 1.0, 2.0, 3.0], [0.2, 0.3, 0.5])
    np.testing.assert_allclose(expert_posterior(dist, 0.0), dist.probs)


@pytest.mark.parametrize("kappa", [0.1, 1.0, 10.0])
def test_posterior_dominates_prior(kappa):
    rng = np.random.default_rng(5)
    for _ in range(20):
        probs = rng.dirichlet(np.ones(6))
        dist = ReturnDistribution(np.linspace(-1.0, 5.0, 7), probs)
        post = expert_posterior(dist, kappa)
        assert np.all(np.cumsum(post) <= np.cumsum(dist.probs) + 1e-12)


def test_large_kappa_is_stable():
    dist = ReturnDistribution([0.0, 50.0, 100.0], [0.999, 0.001])
    post = expert_posterior(dist, 1000.0)
    assert np.all(np.isfinite(post))
    assert post[1] == pytest.approx(1.0)
    assert sample_expert_return(dist, 1000.0, np.random.default_rng(1)) == 75.0


def test_return_distribution_validation():
    with pytest.raises(SearchError):
        ReturnDistribution([0.0, 1.0, 2.0], [0.5])
    with pytest.raises(SearchError):
        ReturnDistribution([0.0, 1.0, 2.0], [0.7, 0.7])
    dist = ReturnDistribution.from_logits([0.0, 1.0, 2.0], [0.0, 0.0])
    np.testing.assert_allclose(dist.probs, [0.5, 0.5])
    np.testing.assert_allclose(dist.centers, [0.5, 1.5])


def test_select_action_from_logits():
    assert select_action_from_logits([0.1, 3.0, -1.0]) == 1
    with pytest.raises(SearchError):
        select_action_from_logits([0.1, 3.0], mode="sample")
    picks = {select_action_from_logits([0.0, 0.0, 0.0], "sample", np.random.default_rng(s)) for s in range(30)}
    assert picks == {0, 1, 2}


def test_session_history_context():
    history = _history(3, 7)
    context = history.context(np.ones(3), 5)
    assert context.T == 5
    np.testing.assert_allclose(context.states[-1], np.ones(3))
    assert context.actions[:-1].tolist() == history.actions[-4:]
    assert history.carried == pytest.approx(history.rtg[-1] - history.rewards[-1])


@pytest.mark.parametrize("delta, calls", [(2, 12), (1, 21)])
def test_forward_call_limit(long_model, tiny_cfg, delta, calls):
    history = _history(tiny_cfg.state_dim, 19)
    cfg = SearchConfig(delta=delta, T_max=20)
    decision = act(long_model, history, np.zeros(tiny_cfg.state_dim), cfg, np.random.default_rng(0))
    assert decision.forward_calls <= calls
    assert decision.forward_calls == len(decision.estimates) + 1
    assert 0 <= decision.action < tiny_cfg.n_items


def test_finer_grid_never_lowers_estimate(long_model, tiny_cfg):
    history = _history(tiny_cfg.state_dim, 15, seed=4)
    context = history.context(np.zeros(tiny_cfg.state_dim), 20)
    coarse = estimate_max_returns(long_model, context, SearchConfig(delta=4, T_max=20))
    fine = estimate_max_returns(long_model, context, SearchConfig(delta=1, T_max=20))
    assert [T for T, _ in fine] == list(range(1, 17))
    assert max(v for _, v in fine) >= max(v for _, v in coarse)


def test_search_picks_a_grid_length(long_model, tiny_cfg):
    history = _history(tiny_cfg.state_dim, 9, seed=2)
    cfg = SearchConfig(delta=3, T_max=20, tie_tol=0.0)
    decision = act(long_model, history, np.zeros(tiny_cfg.state_dim), cfg, np.random.default_rng(0))
    grid = [T for T, _ in decision.estimates]
    assert grid == [1, 4, 7, 10]
    best = max(v for _, v in decision.estimates)
    assert dict(decision.estimates)[decision.T_star] == best
    assert sum(decision.return_probs) == pytest.approx(1.0)


def test_without_max_head_full_history(long_model, tiny_cfg):
    history = _history(tiny_cfg.state_dim, 6)
    cfg = SearchConfig(T_max=20, max_head=False)
    decision = act(long_model, history, np.zeros(tiny_cfg.state_dim), cfg, np.random.default_rng(0))
    assert decision.T_star == 7
    assert decision.estimates == []
    assert decision.forward_calls == 2


def test_carried_target(long_model, tiny_cfg):
    history = SessionHistory(tiny_cfg.state_dim)
    lo, hi = tiny_cfg.return_bins[0], tiny_cfg.return_bins[-1]
    history.record(np.zeros(tiny_cfg.state_dim), 0, 0.25 * (hi - lo), lo + 0.75 * (hi - lo))
    cfg = SearchConfig(T_max=20, resample_each_step=False)
    decision = act(long_model, history, np.zeros(tiny_cfg.state_dim), cfg, np.random.default_rng(0))
    assert decision.target_return == pytest.approx(history.carried)


def test_act_is_reproducible(long_model, tiny_cfg):
    history = _history(tiny_cfg.state_dim, 5, seed=9)
    cfg = SearchConfig(T_max=20, action_mode="sample")
    state = np.ones(tiny_cfg.state_dim)
    a = act(long_model, history, state, cfg, np.random.default_rng(3))
    b = act(long_model, history, state, cfg, np.random.default_rng(3))
    assert (a.action, a.T_star, a.target_return) == (b.action, b.T_star, b.target_return)
