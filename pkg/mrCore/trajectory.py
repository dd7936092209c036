############################################################
# misret: offline return-conditioned recommendation        #
# Trajectories, returns-to-go, context windows, datasets.  #
############################################################

import json
from dataclasses import dataclass, replace

import numpy as np

from .utils import setup_log

log = setup_log("mrCore.trajectory")

# Intra-step token order of the linearized window.
TOKEN_ORDER = ("s", "R", "a")

DATASET_FORMAT = "misret-dataset"
DATASET_VERSION = 1


class TrajectoryError(Exception):
    pass


class WindowError(Exception):
    pass


class DatasetParseError(Exception):
    pass


@dataclass
class Step:
    state: np.ndarray
    action: int
    reward: float


def compute_returns_to_go(rewards, gamma=1.0):
    """
    Returns-to-go R_t = sum_{k>=t} gamma^(k-t) * r_k.

    :param rewards: Rewards of one episode, in order.
    :param gamma: Discount in [0, 1].
    :return: Array of the same length as ``rewards``.
    :rtype: numpy.ndarray
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise TrajectoryError("empty trajectory")
    if not np.all(np.isfinite(rewards)):
        raise TrajectoryError("non-finite reward in trajectory")
    if not 0.0 <= gamma <= 1.0:
        raise TrajectoryError("gamma must lie in [0, 1], got %r" % gamma)

    rtg = np.empty_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + gamma * running
        rtg[t] = running
    return rtg


class Trajectory:
    """
    One logged episode.

    * ``states`` (float32, [n, d_s])
    * ``actions`` (int64, [n])
    * ``rewards`` (float32, [n])
    * ``rtg`` (float64, [n]) -- derived, never stored on disk.
    """

    def __init__(self, states, actions, rewards, traj_id=0, source="", gamma=1.0):
        self.states = np.asarray(states, dtype=np.float32)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float32)
        self.id = traj_id
        self.source = source

        if self.states.ndim != 2:
            raise TrajectoryError("states must be a 2-D array, got shape %s" % (self.states.shape,))
        n = self.states.shape[0]
        if n < 1:
            raise TrajectoryError("empty trajectory")
        if self.actions.shape != (n,) or self.rewards.shape != (n,):
            raise TrajectoryError("states, actions and rewards lengths differ")
        if not np.all(np.isfinite(self.states)):
            raise TrajectoryError("non-finite state in trajectory %s" % traj_id)

        self.rtg = compute_returns_to_go(self.rewards, gamma)

    def __len__(self):
        return self.states.shape[0]

    @property
    def steps(self):
        return [Step(self.states[t], int(self.actions[t]), float(self.rewards[t]))
                for t in range(len(self))]

    @property
    def episode_return(self):
        return float(self.rtg[0])

    def to_record(self):
        return {
            "id": self.id,
            "source": self.source,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist()
        }


@dataclass
class ContextWindow:
    """
    A length-T suffix of a trajectory, possibly left-padded.

    ``mask[i]`` is False for pad steps. Pad steps carry zeros.
    """
    states: np.ndarray
    rtg: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(len(self.actions), dtype=bool)

    @property
    def T(self):
        return len(self.actions)

    @property
    def n_real(self):
        return int(self.mask.sum())

    @property
    def steps(self):
        return [Step(self.states[i], int(self.actions[i]), float(self.rewards[i]))
                for i in range(self.T) if self.mask[i]]

    def truncate(self, T):
        """
        Keeps the newest ``T`` positions.
        """
        if not 1 <= T <= self.T:
            raise WindowError("window exceeds available history")
        return ContextWindow(self.states[-T:], self.rtg[-T:], self.actions[-T:],
                             self.rewards[-T:], self.mask[-T:])

    def left_pad(self, T):
        n_pad = T - self.T
        if n_pad < 0:
            raise WindowError("cannot pad a window of %d steps to %d" % (self.T, T))
        if n_pad == 0:
            return self
        d_s = self.states.shape[1]
        return ContextWindow(
            np.concatenate([np.zeros((n_pad, d_s), dtype=self.states.dtype), self.states]),
            np.concatenate([np.zeros(n_pad), self.rtg]),
            np.concatenate([np.zeros(n_pad, dtype=np.int64), self.actions]),
            np.concatenate([np.zeros(n_pad, dtype=self.rewards.dtype), self.rewards]),
            np.concatenate([np.zeros(n_pad, dtype=bool), self.mask])
        )


def linearize(window):
    """
    Token order of a window: (s_0, R_0, a_0, ..., s_{T-1}, R_{T-1}, a_{T-1}).

    :return: List of (kind, position) pairs, exactly 3T long.
    """
    return [(kind, i) for i in range(window.T) for kind in TOKEN_ORDER]


def make_window(traj, t, T):
    """
    The last ``T`` steps of ``traj`` ending at step ``t``.

    :param traj: Source trajectory.
    :type traj: Trajectory
    :param t: Index of the newest step.
    :param T: Number of steps.
    :return: ContextWindow with exactly T real steps.
    """
    if not 0 <= t < len(traj):
        raise WindowError("query index %d outside trajectory of length %d" % (t, len(traj)))
    if T < 1:
        raise WindowError("window length must be >= 1")
    if T > t + 1:
        raise WindowError("window exceeds available history")
    lo = t - T + 1
    hi = t + 1
    return ContextWindow(traj.states[lo:hi].copy(),
                         traj.rtg[lo:hi].copy(),
                         traj.actions[lo:hi].copy(),
                         traj.rewards[lo:hi].copy())


def make_return_bins(trajectories, n_bins=32):
    """
    ``n_bins`` uniform bins over [min, max] of all returns-to-go.

    :return: ``n_bins + 1`` strictly increasing edges.
    """
    if trajectories:
        all_rtg = np.concatenate([tr.rtg for tr in trajectories])
        lo, hi = float(all_rtg.min()), float(all_rtg.max())
    else:
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def exact_value_bins(values):
    """
    Bins centred exactly on the given sorted, evenly spaced values.
    """
    values = np.asarray(sorted(values), dtype=np.float64)
    if values.size < 2:
        raise TrajectoryError("exact-value bins need at least two values")
    half = 0.5 * (values[1] - values[0])
    return np.concatenate([values - half, [values[-1] + half]])


def bin_centers(edges):
    edges = np.asarray(edges, dtype=np.float64)
    return 0.5 * (edges[:-1] + edges[1:])


def bin_index(values, edges):
    """
    Index of the bin containing each value, clamping to the edge range.
    """
    edges = np.asarray(edges, dtype=np.float64)
    values = np.clip(np.asarray(values, dtype=np.float64), edges[0], edges[-1])
    idx = np.searchsorted(edges, values, side='right') - 1
    return np.clip(idx, 0, len(edges) - 2)


class Dataset:
    """
    Immutable collection of trajectories with its return discretization.
    """

    def __init__(self, trajectories, return_bins, catalog_size, state_dim, gamma=1.0):
        self.trajectories = list(trajectories)
        self.return_bins = np.asarray(return_bins, dtype=np.float64)
        self.catalog_size = int(catalog_size)
        self.state_dim = int(state_dim)
        self.gamma = float(gamma)

        if self.return_bins.ndim != 1 or self.return_bins.size < 2 or \
                np.any(np.diff(self.return_bins) <= 0):
            raise TrajectoryError("bin edges must be strictly increasing")

        lo, hi = self.return_bins[0], self.return_bins[-1]
        for tr in self.trajectories:
            if tr.states.shape[1] != self.state_dim:
                raise TrajectoryError("trajectory %s has state dim %d, expected %d"
                                      % (tr.id, tr.states.shape[1], self.state_dim))
            if np.any(tr.actions < 0) or np.any(tr.actions >= self.catalog_size):
                raise TrajectoryError("trajectory %s has an action outside the catalog" % tr.id)
            if tr.rtg.min() < lo - 1e-9 or tr.rtg.max() > hi + 1e-9:
                raise TrajectoryError("trajectory %s has returns outside the bin range" % tr.id)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_bins(self):
        return self.return_bins.size - 1

    @property
    def max_length(self):
        return max((len(tr) for tr in self.trajectories), default=0)

    @property
    def rtg_scale(self):
        return float(max(abs(self.return_bins[0]), abs(self.return_bins[-1]), 1e-6))

    def header(self):
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "catalog_size": self.catalog_size,
            "state_dim": self.state_dim,
            "gamma": self.gamma,
            "return_bins": self.return_bins.tolist()
        }


def save_dataset(ds, path):
    """
    Writes ``ds`` as JSON lines: one header object, then one object per trajectory.
    """
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(ds.header()) + "\n")
        for tr in ds.trajectories:
            f.write(json.dumps(tr.to_record()) + "\n")
    log.debug("Saved %d trajectories to %s" % (len(ds), path))


def _parse_record(rec, state_dim, catalog_size, bins, gamma):
    for key in ("id", "source", "states", "actions", "rewards"):
        if key not in rec:
            raise ValueError("missing field '%s'" % key)
    states = np.asarray(rec["states"], dtype=np.float64)
    rewards = np.asarray(rec["rewards"], dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != state_dim:
        raise ValueError("states do not have dimension %d" % state_dim)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(rewards))):
        raise ValueError("non-finite value")
    tr = Trajectory(states, rec["actions"], rewards, traj_id=rec["id"],
                    source=rec["source"], gamma=gamma)
    if np.any(tr.actions < 0) or np.any(tr.actions >= catalog_size):
        raise ValueError("action outside the catalog of %d items" % catalog_size)
    if tr.rtg.min() < bins[0] - 1e-9 or tr.rtg.max() > bins[-1] + 1e-9:
        raise ValueError("returns-to-go outside the bin range [%g, %g]" % (bins[0], bins[-1]))
    return tr


def load_dataset(path):
    """
    Reads a dataset written by ``save_dataset``. Returns-to-go are recomputed.

    :raises DatasetParseError: naming the offending record index.
    """
    with open(path, 'r', encoding='utf-8') as f:
        lines = [ln for ln in f.read().split("\n") if ln.strip()]

    if not lines:
        raise DatasetParseError("%s: missing dataset header" % path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetParseError("%s: malformed dataset header: %s" % (path, err))
    if header.get("format") != DATASET_FORMAT:
        raise DatasetParseError("%s: not a %s file" % (path, DATASET_FORMAT))
    if header.get("version") != DATASET_VERSION:
        raise DatasetParseError("%s: unsupported dataset version %r" % (path, header.get("version")))

    try:
        state_dim = int(header["state_dim"])
        catalog_size = int(header["catalog_size"])
        bins = np.asarray(header["return_bins"], dtype=np.float64)
        gamma = float(header.get("gamma", 1.0))
    except KeyError as err:
        raise DatasetParseError("%s: dataset header lacks %s" % (path, err))
    except (TypeError, ValueError) as err:
        raise DatasetParseError("%s: malformed dataset header: %s" % (path, err))
    if bins.ndim != 1 or bins.size < 2 or np.any(np.diff(bins) <= 0):
        raise DatasetParseError("%s: bin edges must be strictly increasing" % path)

    trajectories = []
    for idx, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            trajectories.append(_parse_record(rec, state_dim, catalog_size, bins, gamma))
        except (json.JSONDecodeError, ValueError, TypeError, TrajectoryError) as err:
            log.error("PARSING FAILED. Record %d" % idx)
            raise DatasetParseError("record %d: %s" % (idx, err))

    return Dataset(trajectories, bins, catalog_size, state_dim, gamma)


class BatchSampler:
    """
    Draws context windows uniformly over (trajectory, end-index) pairs.

    Each sampler owns its RNG stream, derived from (seed, worker_id).
    """

    def __init__(self, ds, seed, worker_id=0):
        if len(ds) == 0:
            raise TrajectoryError("cannot sample from an empty dataset")
        self.ds = ds
        self.rng = np.random.default_rng([int(seed), int(worker_id)])
        self.pairs = np.array([(i, t) for i, tr in enumerate(ds.trajectories)
                               for t in range(len(tr))], dtype=np.int64)

    def sample(self, batch, T, vary_length=False):
        """
        :param batch: Number of windows.
        :param T: Window length; shorter histories are left-padded.
        :param vary_length: Draw each history length uniformly from [1, T].
        :return: List of ContextWindow, each exactly T long.
        """
        if batch <= 0:
            raise TrajectoryError("batch must be positive, got %d" % batch)
        if T < 1:
            raise WindowError("window length must be >= 1")

        picks = self.rng.integers(0, len(self.pairs), size=batch)
        lengths = self.rng.integers(1, T + 1, size=batch) if vary_length else np.full(batch, T)

        windows = []
        for p, L in zip(picks, lengths):
            i, t = self.pairs[p]
            traj = self.ds.trajectories[i]
            windows.append(make_window(traj, int(t), int(min(L, t + 1))).left_pad(T))
        return windows


def sample_batch(ds, batch, T, rng_seed, vary_length=False):
    return BatchSampler(ds, rng_seed).sample(batch, T, vary_length=vary_length)


def clamp_return(value, edges):
    lo, hi = float(edges[0]), float(edges[-1])
    if value < lo or value > hi:
        clamped = min(max(value, lo), hi)
        log.warning("Conditioning return %.4f outside [%.4f, %.4f], clamped to %.4f"
                    % (value, lo, hi, clamped))
        return clamped
    return float(value)


def relabel_rtg(window, target_return, observed_reward=None, bins=None):
    """
    Sets the newest return-to-go token to ``target_return``.

    :param window: Window to relabel (left untouched).
    :param target_return: Conditioning return for the newest step.
    :param observed_reward: Reward observed after acting, if any.
    :param bins: Return bin edges used for clamping.
    :return: (relabelled window, carried target for the next step or None)
    """
    if bins is not None:
        target_return = clamp_return(target_return, bins)
    rtg = window.rtg.astype(np.float64, copy=True)
    rtg[-1] = target_return
    carried = None if observed_reward is None else target_return - float(observed_reward)
    return replace(window, rtg=rtg), carried
