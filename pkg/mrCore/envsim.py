############################################################
# misret: offline return-conditioned recommendation        #
# Latent-factor recommendation simulator and behaviour     #
# data collection.                                         #
############################################################

from collections import deque
from dataclasses import dataclass, asdict, fields

import numpy as np
from scipy import sparse
from scipy.special import expit

from .mf import als_factorize
from .trajectory import Trajectory, Dataset, make_return_bins
from .utils import setup_log, derive_seeds

log = setup_log("mrCore.envsim")


class SessionError(Exception):
    pass


@dataclass
class WorldSpec:
    """
    Everything needed to rebuild a world from config alone.
    """
    n_users: int = 200
    n_items: int = 50
    d_f: int = 8
    k: int = 10
    max_steps: int = 30
    quit_patience: int = 3
    quit_threshold: float = 1.0
    r_max: float = 5.0
    reward_scale: float = 5.0
    noise_sigma: float = 0.1
    repeat_decay: float = 0.5
    seed: int = 0
    source: str = "latent"
    mf_observed: float = 0.3
    mf_noise: float = 0.1
    mf_epochs: int = 20
    mf_reg: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def state_dim(self):
        return 2 * self.d_f


class LatentWorld:
    """
    Immutable user/item factor world. Safe to share between env handles.
    """

    def __init__(self, user_factors, item_factors, spec):
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.spec = spec

        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2 or \
                self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise SessionError("user and item factors must share the latent dimension")
        if self.user_factors.shape[1] < 1:
            raise SessionError("latent dimension must be >= 1")
        if not (np.all(np.isfinite(self.user_factors)) and np.all(np.isfinite(self.item_factors))):
            raise SessionError("non-finite factors")
        if spec.noise_sigma < 0 or spec.reward_scale <= 0:
            raise SessionError("noise_sigma must be >= 0 and reward_scale > 0")

        self.user_factors.setflags(write=False)
        self.item_factors.setflags(write=False)

    @property
    def n_users(self):
        return self.user_factors.shape[0]

    @property
    def n_items(self):
        return self.item_factors.shape[0]

    @property
    def d_f(self):
        return self.user_factors.shape[1]

    @property
    def state_dim(self):
        return 2 * self.d_f

    @property
    def noise_sigma(self):
        return self.spec.noise_sigma

    @property
    def reward_scale(self):
        return self.spec.reward_scale

    def affinity(self, user_id):
        return expit(self.item_factors @ self.user_factors[user_id])


def _draw_factors(spec, rng):
    # u.v has unit variance for any d_f
    std = spec.d_f ** -0.25
    users = rng.normal(0.0, std, size=(spec.n_users, spec.d_f))
    items = rng.normal(0.0, std, size=(spec.n_items, spec.d_f))
    return users, items


def world_from_completion(spec, users, items, rng):
    """
    Observes a fraction of the user x item affinities of a ground-truth world
    with noise, completes them by matrix factorization and uses the completed
    factors as the simulator.
    """
    n_obs = max(1, int(round(spec.mf_observed * spec.n_users * spec.n_items)))
    flat = rng.choice(spec.n_users * spec.n_items, size=n_obs, replace=False)
    rows, cols = np.divmod(flat, spec.n_items)
    vals = np.einsum('ij,ij->i', users[rows], items[cols]) + rng.normal(0.0, spec.mf_noise, size=n_obs)
    observed = sparse.coo_matrix((vals, (rows, cols)), shape=(spec.n_users, spec.n_items))
    U, V = als_factorize(observed, spec.d_f, epochs=spec.mf_epochs,
                         seed=int(rng.integers(2 ** 31)), reg=spec.mf_reg)
    log.debug("Completed world from %d observed interactions" % n_obs)
    return U, V


def build_world(spec):
    """
    :param spec: World description.
    :type spec: WorldSpec
    :rtype: LatentWorld
    """
    if spec.d_f < 1:
        raise SessionError("d_f must be >= 1")
    rng = np.random.default_rng(spec.seed)
    users, items = _draw_factors(spec, rng)
    if spec.source == "mf":
        users, items = world_from_completion(spec, users, items, rng)
    elif spec.source != "latent":
        raise SessionError("unknown world source '%s'" % spec.source)
    return LatentWorld(users, items, spec)


class SessionState:

    def __init__(self, user_id, k, rng):
        self.user_id = user_id
        self.history = deque(maxlen=k)
        self.step_count = 0
        self.done = False
        self.quit_counter = 0
        self.rng = rng

    def repeats(self, item):
        return sum(1 for a, _ in self.history if a == item)


def state_tracker_encode(history, user_embedding):
    """
    [user factors || reward-weighted mean of the last k item factors].

    :param history: Sequence of (item factor vector, reward) pairs.
    :param user_embedding: User factor vector.
    :return: State vector of dimension 2 * d_f.
    """
    u = np.asarray(user_embedding, dtype=np.float64)
    block = np.zeros_like(u)
    if len(history):
        for v, r in history:
            block = block + r * np.asarray(v, dtype=np.float64)
        block = block / len(history)
    return np.concatenate([u, block])


def _encode_session(world, session):
    pairs = [(world.item_factors[a], r) for a, r in session.history]
    return state_tracker_encode(pairs, world.user_factors[session.user_id])


def env_reset(world, user_id=None, seed=None):
    """
    Starts a session with an empty history.

    :return: (SessionState, state vector)
    """
    rng = np.random.default_rng(seed)
    if user_id is None:
        user_id = int(rng.integers(world.n_users))
    elif not 0 <= user_id < world.n_users:
        raise SessionError("unknown user_id %r" % user_id)
    session = SessionState(int(user_id), world.spec.k, rng)
    return session, _encode_session(world, session)


def env_step(world, session, action):
    """
    :return: (next state vector, reward, done)
    """
    if session.done:
        raise SessionError("session is done, no further steps accepted")
    action = int(action)
    if not 0 <= action < world.n_items:
        raise SessionError("action %d outside catalog of %d items" % (action, world.n_items))

    spec = world.spec
    score = world.reward_scale * expit(world.user_factors[session.user_id] @ world.item_factors[action])
    if spec.noise_sigma > 0:
        score += session.rng.normal(0.0, spec.noise_sigma)
    reward = float(np.clip(score, 0.0, spec.r_max) * spec.repeat_decay ** session.repeats(action))

    session.history.append((action, reward))
    session.step_count += 1
    session.quit_counter = session.quit_counter + 1 if reward < spec.quit_threshold else 0
    session.done = session.step_count >= spec.max_steps or session.quit_counter >= spec.quit_patience
    return _encode_session(world, session), reward, session.done


def oracle_action(world, session):
    """
    Myopic best item for the current session, repeat decay included.
    """
    decay = np.array([world.spec.repeat_decay ** session.repeats(a) for a in range(world.n_items)])
    return int(np.argmax(world.affinity(session.user_id) * decay))


def _collect_episodes(world, eps, episodes, rng, start_id=0, gamma=1.0):
    trajectories = []
    source = "eps=%.2f" % eps
    for n in range(episodes):
        session, state = env_reset(world, seed=int(rng.integers(2 ** 63)))
        states, actions, rewards = [], [], []
        done = False
        while not done:
            if rng.random() < eps:
                action = int(rng.integers(world.n_items))
            else:
                action = oracle_action(world, session)
            states.append(state)
            actions.append(action)
            state, reward, done = env_step(world, session, action)
            rewards.append(reward)
        trajectories.append(Trajectory(states, actions, rewards, traj_id=start_id + n, source=source,
                                       gamma=gamma))
    return trajectories


def gen_behavior_data(world, eps, episodes, seed, n_bins=32, gamma=1.0):
    """
    Rolls out a noisy oracle: the oracle item with probability 1 - eps,
    a uniformly random item otherwise.

    :rtype: Dataset
    """
    if episodes < 1:
        raise SessionError("episodes must be >= 1")
    if not 0.0 <= eps <= 1.0:
        raise SessionError("policy quality eps must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    trajs = _collect_episodes(world, eps, episodes, rng, gamma=gamma)
    return Dataset(trajs, make_return_bins(trajs, n_bins), world.n_items, world.state_dim, gamma)


def gen_mixed_data(world, mix, episodes, seed, n_bins=32, gamma=1.0):
    """
    Concatenation of behaviour datasets of several qualities.

    :param mix: List of (eps, fraction) pairs.
    """
    if episodes < 1:
        raise SessionError("episodes must be >= 1")
    total = sum(frac for _, frac in mix)
    if total <= 0:
        raise SessionError("mix fractions must sum to a positive value")
    counts = [int(round(episodes * frac / total)) for _, frac in mix]
    counts[-1] = episodes - sum(counts[:-1])

    trajs = []
    for (eps, _), count, part_seed in zip(mix, counts, derive_seeds(seed, len(mix))):
        rng = np.random.default_rng(part_seed)
        trajs.extend(_collect_episodes(world, eps, count, rng, start_id=len(trajs), gamma=gamma))
        log.debug("Collected %d episodes at eps=%.2f" % (count, eps))
    return Dataset(trajs, make_return_bins(trajs, n_bins), world.n_items, world.state_dim, gamma)


class SimEnv:
    """
    Single-owner environment handle with its own seed stream.
    """

    def __init__(self, world, seed, env_id=0):
        self.world = world
        self.seed = int(seed)
        self.env_id = env_id
        self.episodes = 0
        self.session = None

    def reset(self, user_id=None):
        seed = self.seed if self.episodes == 0 else [self.seed, self.episodes]
        self.episodes += 1
        self.session, state = env_reset(self.world, user_id, seed)
        return state

    def step(self, action):
        if self.session is None:
            raise SessionError("reset the environment before stepping")
        return env_step(self.world, self.session, action)

    @property
    def user_id(self):
        return None if self.session is None else self.session.user_id


def parallel_eval_envs(world, n, seed):
    if n < 1:
        raise SessionError("need at least one environment")
    return [SimEnv(world, s, env_id=i) for i, s in enumerate(derive_seeds(seed, n))]
