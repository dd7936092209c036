############################################################
# misret: offline return-conditioned recommendation        #
# History-length search, expert-return sampling and        #
# action selection.                                        #
############################################################

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
from scipy.special import logsumexp, softmax

from .model import collate
from .trajectory import ContextWindow, bin_centers, relabel_rtg
from .utils import setup_log

log = setup_log("mrCore.inference")

ACTION_MODES = ("greedy", "sample")
TIE_BREAKS = ("longest", "shortest")


class SearchError(Exception):
    pass


@dataclass
class SearchConfig:
    delta: int = 2
    T_max: int = 20
    kappa: float = 10.0
    action_mode: str = "greedy"
    tie_break: str = "longest"
    tie_tol: float = 0.05
    max_head: bool = True
    resample_each_step: bool = True

    def __post_init__(self):
        if not 1 <= self.delta <= self.T_max:
            raise SearchError("delta must satisfy 1 <= delta <= T_max, got %d" % self.delta)
        if self.action_mode not in ACTION_MODES:
            raise SearchError("action_mode must be one of %s" % (ACTION_MODES,))
        if self.tie_break not in TIE_BREAKS:
            raise SearchError("tie_break must be one of %s" % (TIE_BREAKS,))
        if self.tie_tol < 0:
            raise SearchError("tie_tol must be >= 0")

    def to_dict(self):
        return asdict(self)


class ReturnDistribution:
    """
    Categorical distribution over return bins.
    """

    def __init__(self, bin_edges, probs):
        self.bin_edges = np.asarray(bin_edges, dtype=np.float64)
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.probs.shape != (self.bin_edges.size - 1,):
            raise SearchError("need one probability per bin")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-6:
            raise SearchError("bin probabilities must be nonnegative and sum to 1")

    @property
    def centers(self):
        return bin_centers(self.bin_edges)

    @classmethod
    def from_logits(cls, bin_edges, logits):
        return cls(bin_edges, softmax(np.asarray(logits, dtype=np.float64)))


def history_grid(available, delta, T_max):
    """
    {1, 1 + delta, 1 + 2 delta, ...} up to min(T_max, available), with the
    full available length always appended.
    """
    L = min(T_max, available)
    if L < 1:
        raise SearchError("no history available")
    grid = list(range(1, L + 1, delta))
    if grid[-1] != L:
        grid.append(L)
    return grid


def _run(model, window):
    with torch.no_grad():
        out = model(collate([window], dtype=model.dtype))
    return {k: v[0].detach().cpu().numpy() for k, v in out.items()}


def _search(model, context, cfg):
    grid = history_grid(context.n_real, cfg.delta, cfg.T_max)
    estimates = []
    outputs = {}
    for T in grid:
        out = _run(model, context.truncate(T))
        outputs[T] = out
        estimates.append((T, float(out["expectile_value"])))
    return estimates, outputs


def estimate_max_returns(model, context, cfg):
    """
    Expectile-head estimate of the in-support maximal return for each
    truncation length of the search grid.

    :param context: ContextWindow holding the whole available history, newest step last.
    :return: List of (T, R_hat), T ascending.
    """
    if context.n_real < 1:
        raise SearchError("empty context")
    return _search(model, context, cfg)[0]


def select_history_length(estimates, tie_break="longest", tie_tol=0.0):
    """
    argmax_T R_hat(T). Estimates within ``tie_tol`` of the best count as tied.
    """
    if not estimates:
        raise SearchError("no estimates to select from")
    best = max(v for _, v in estimates)
    tied = [T for T, v in estimates if v >= best - tie_tol]
    return max(tied) if tie_break == "longest" else min(tied)


def expert_posterior(dist, kappa):
    """
    P(R | expert) proportional to exp(kappa R) P(R), normalized in log space.
    """
    with np.errstate(divide='ignore'):
        logp = np.log(dist.probs) + kappa * dist.centers
    if not np.any(np.isfinite(logp)):
        raise SearchError("expert posterior has no mass")
    return np.exp(logp - logsumexp(logp))


def sample_expert_return(dist, kappa, rng, size=None):
    """
    Draws a bin from the expert posterior and returns its center.
    """
    post = expert_posterior(dist, kappa)
    idx = rng.choice(post.size, p=post, size=size)
    return dist.centers[idx] if size is not None else float(dist.centers[idx])


def select_action_from_logits(logits, mode="greedy", rng=None):
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(logits))
    if rng is None:
        raise SearchError("sample mode needs an rng")
    return int(rng.choice(logits.size, p=softmax(logits)))


def select_action(model, window, cfg, rng=None):
    """
    Item from the action logits at the newest position of ``window``.
    """
    out = _run(model, window)
    return select_action_from_logits(out["action_logits"][-1], cfg.action_mode, rng)


class SessionHistory:
    """
    Steps taken so far in one episode, with the return each step was conditioned on.
    """

    def __init__(self, state_dim):
        self.state_dim = state_dim
        self.states = []
        self.actions = []
        self.rewards = []
        self.rtg = []
        self.carried = None

    def __len__(self):
        return len(self.actions)

    def context(self, state, T_max):
        """
        History plus the current state, at most ``T_max`` steps. The newest
        step's return and action are placeholders.
        """
        states = self.states + [np.asarray(state, dtype=np.float32)]
        rtg = self.rtg + [0.0]
        actions = self.actions + [0]
        rewards = self.rewards + [0.0]
        lo = max(0, len(states) - T_max)
        return ContextWindow(np.stack(states[lo:]).astype(np.float32),
                             np.asarray(rtg[lo:], dtype=np.float64),
                             np.asarray(actions[lo:], dtype=np.int64),
                             np.asarray(rewards[lo:], dtype=np.float32))

    def record(self, state, action, reward, target_return):
        self.states.append(np.asarray(state, dtype=np.float32))
        self.actions.append(int(action))
        self.rewards.append(float(reward))
        self.rtg.append(float(target_return))
        self.carried = float(target_return) - float(reward)


@dataclass
class Decision:
    action: int
    T_star: int
    estimates: list = field(default_factory=list)
    return_probs: list = field(default_factory=list)
    target_return: float = 0.0
    forward_calls: int = 0


def act(model, history, state, cfg, rng):
    """
    History-length search, expert-return sampling, relabelling and action
    selection for the current ``state``.

    :param history: SessionHistory of the episode so far.
    :param cfg: SearchConfig.
    :param rng: numpy Generator for return and action sampling.
    :rtype: Decision
    """
    calls_before = model.forward_calls
    T_max = min(cfg.T_max, model.cfg.T_max)
    context = history.context(state, T_max)

    if cfg.max_head:
        estimates, outputs = _search(model, context, cfg)
        T_star = select_history_length(estimates, cfg.tie_break, cfg.tie_tol)
        out = outputs[T_star]
    else:
        estimates = []
        T_star = context.n_real
        out = _run(model, context.truncate(T_star))

    bins = model.cfg.return_bins
    dist = ReturnDistribution.from_logits(bins, out["return_logits"][-1])
    if cfg.resample_each_step or history.carried is None:
        target = sample_expert_return(dist, cfg.kappa, rng)
    else:
        target = history.carried

    window, _ = relabel_rtg(context.truncate(T_star), target, bins=bins)
    action = select_action(model, window, cfg, rng)
    return Decision(action=action, T_star=T_star, estimates=estimates,
                    return_probs=dist.probs.tolist(), target_return=float(window.rtg[-1]),
                    forward_calls=model.forward_calls - calls_before)
