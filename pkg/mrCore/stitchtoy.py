############################################################
# misret: offline return-conditioned recommendation        #
# Two-trajectory stitching toy and its chain MDP.          #
############################################################

import numpy as np

from .trajectory import Trajectory, Dataset, exact_value_bins

STATE_NAMES = ("s_a0", "s_b0", "s_mid", "s_a1", "s_b1")
N_ACTIONS = 2

# (state, action) -> (next state, reward)
TRANSITIONS = {
    ("s_a0", 0): ("s_mid", 0.0),
    ("s_a0", 1): ("s_mid", 0.0),
    ("s_b0", 0): ("s_mid", 0.5),
    ("s_b0", 1): ("s_mid", 0.5),
    ("s_mid", 0): ("s_a1", 1.0),
    ("s_mid", 1): ("s_b1", 0.0),
}

TERMINALS = ("s_a1", "s_b1")

# Every return-to-go present in the logged data.
TOY_RETURNS = (0.0, 0.5, 1.0)


def one_hot(name):
    vec = np.zeros(len(STATE_NAMES), dtype=np.float32)
    vec[STATE_NAMES.index(name)] = 1.0
    return vec


def state_name(vec):
    return STATE_NAMES[int(np.argmax(vec))]


def _rollout(start, actions, traj_id, source):
    states, rewards = [], []
    s = start
    for a in actions:
        states.append(one_hot(s))
        s, r = TRANSITIONS[(s, a)]
        rewards.append(r)
    return Trajectory(states, actions, rewards, traj_id=traj_id, source=source)


class StitchEnv:
    """
    Deterministic chain MDP of the toy. Starts in s_a0 or s_b0.
    """

    def __init__(self, start="b"):
        if start not in ("a", "b"):
            raise ValueError("start must be 'a' or 'b', got %r" % start)
        self.start = "s_%s0" % start
        self.current = None
        self.visited = []

    def reset(self):
        self.current = self.start
        self.visited = [self.current]
        return one_hot(self.current)

    def step(self, action):
        if self.current is None or self.current in TERMINALS:
            raise ValueError("episode finished, reset first")
        self.current, reward = TRANSITIONS[(self.current, int(action))]
        self.visited.append(self.current)
        return one_hot(self.current), reward, self.current in TERMINALS

    @property
    def terminal(self):
        return self.current if self.current in TERMINALS else None


def build_stitch_toy():
    """
    Trajectory A: s_a0 -(0, r=0)-> s_mid -(0, r=1)-> s_a1, return 1.0.
    Trajectory B: s_b0 -(0, r=0.5)-> s_mid -(1, r=0)-> s_b1, return 0.5.

    :return: (Dataset, StitchEnv starting in s_b0)
    """
    traj_a = _rollout("s_a0", [0, 0], 0, "toy-A")
    traj_b = _rollout("s_b0", [0, 1], 1, "toy-B")
    ds = Dataset([traj_a, traj_b], exact_value_bins(TOY_RETURNS), N_ACTIONS, len(STATE_NAMES))
    return ds, StitchEnv("b")


def optimal_return(start):
    """
    Best achievable return from ``start`` by enumerating the chain.
    """
    if start in TERMINALS:
        return 0.0
    return max(r + optimal_return(nxt) for (s, _), (nxt, r) in TRANSITIONS.items() if s == start)


def dataset_max_rtg(ds, state, prefix=None):
    """
    Largest logged return-to-go at ``state`` over windows that match ``prefix``
    (a list of earlier state names, oldest first).
    """
    prefix = list(prefix or [])
    best = None
    for tr in ds.trajectories:
        names = [state_name(s) for s in tr.states]
        for t, name in enumerate(names):
            if name != state or t < len(prefix):
                continue
            if names[t - len(prefix):t] != prefix:
                continue
            best = tr.rtg[t] if best is None else max(best, tr.rtg[t])
    return best
