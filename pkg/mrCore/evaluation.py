############################################################
# misret: offline return-conditioned recommendation        #
# Policy rollouts: simulator metrics and the stitching     #
# demonstration.                                           #
############################################################

from dataclasses import replace

import numpy as np

from .envsim import parallel_eval_envs
from .inference import SessionHistory, act, SearchError
from .model import init_model, forward
from .stitchtoy import build_stitch_toy, StitchEnv
from .trainer import train, batch_action_accuracy
from .trajectory import make_window
from .utils import setup_log

log = setup_log("mrCore.evaluation")

METRICS = ("R_cumu", "R_avg", "Length")


def run_episode(model, env, cfg, rng):
    """
    One episode of ``act`` against ``env``.

    :return: (rewards, decisions)
    """
    state = env.reset()
    history = SessionHistory(len(state))
    rewards = []
    decisions = []
    done = False
    while not done:
        decision = act(model, history, state, cfg, rng)
        next_state, reward, done = env.step(decision.action)
        history.record(state, decision.action, reward, decision.target_return)
        rewards.append(float(reward))
        decisions.append(decision)
        state = next_state
    return rewards, decisions


def episode_record(env_id, episode, rewards, decisions, user=None):
    length = len(rewards)
    r_cumu = float(np.sum(rewards))
    return {
        "env": env_id,
        "episode": episode,
        "user": user,
        "R_cumu": r_cumu,
        "R_avg": r_cumu / length,
        "Length": length,
        "T_star": [d.T_star for d in decisions],
        "forward_calls": [d.forward_calls for d in decisions]
    }


def rollout_env(model, env, episodes, cfg, seed):
    """
    All episodes of one env handle. The action RNG of each episode is
    derived from (seed, env id, episode), so records do not depend on
    which worker runs the env.
    """
    records = []
    for e in range(episodes):
        rng = np.random.default_rng([seed, env.env_id, e])
        rewards, decisions = run_episode(model, env, cfg, rng)
        records.append(episode_record(env.env_id, e, rewards, decisions, env.user_id))
    return records


def summarize(records):
    out = {}
    for key in METRICS:
        values = np.array([r[key] for r in records], dtype=np.float64)
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out


def rollout_eval(model, world, n_envs, episodes_per_env, cfg, seed, pool=None):
    """
    :param model: PolicyModel, used read-only.
    :param world: LatentWorld shared by every env.
    :param n_envs: Number of independent env handles, >= 1.
    :param episodes_per_env: Episodes run on each handle, >= 1.
    :param cfg: SearchConfig.
    :param seed: Root seed of env and action streams.
    :param pool: Optional worker pool with ``map(fun, list of arg tuples)``.
    :return: Report with R_cumu / R_avg / Length mean and std plus per-episode records.
    """
    if n_envs < 1 or episodes_per_env < 1:
        raise SearchError("n_envs and episodes_per_env must be >= 1")
    model.eval()
    envs = parallel_eval_envs(world, n_envs, seed)
    tasks = [(model, env, episodes_per_env, cfg, seed) for env in envs]
    if pool is None:
        per_env = [rollout_env(*t) for t in tasks]
    else:
        per_env = pool.map(rollout_env, tasks)
    records = sorted((r for recs in per_env for r in recs), key=lambda r: (r["env"], r["episode"]))

    report = {"seed": seed, "n_envs": n_envs, "episodes": len(records)}
    report.update(summarize(records))
    report["per_episode"] = records
    log.info("R_cumu %.3f +- %.3f  R_avg %.3f +- %.3f  Length %.2f"
             % (report["R_cumu"]["mean"], report["R_cumu"]["std"], report["R_avg"]["mean"],
                report["R_avg"]["std"], report["Length"]["mean"]))
    return report


def stitch_trial(model_cfg, train_cfg, search_cfg, seed):
    """
    Trains on the two-trajectory toy and checks that the history-length
    search stitches the better continuation onto the worse start.

    :return: Report dict with a ``passed`` flag and every measured value.
    """
    ds, _ = build_stitch_toy()
    mcfg = replace(model_cfg, state_dim=ds.state_dim, n_items=ds.catalog_size,
                   return_bins=tuple(ds.return_bins), rtg_scale=ds.rtg_scale, lm_vocab=0)
    model = init_model(mcfg, None, seed)
    T = min(mcfg.T_max, ds.max_length)
    train(model, ds, None, replace(train_cfg, seed=seed, aux_language=False), T=T)

    traj_a, traj_b = ds.trajectories
    r_mid = float(forward(model, make_window(traj_a, 1, 1))["expectile_value"])
    r_mid_b = float(forward(model, make_window(traj_b, 1, 2))["expectile_value"])
    r_mid_a = float(forward(model, make_window(traj_a, 1, 2))["expectile_value"])

    scfg = replace(search_cfg, T_max=mcfg.T_max, max_head=True)
    runs = {}
    for i, start in enumerate(("b", "a")):
        env = StitchEnv(start)
        rewards, decisions = run_episode(model, env, scfg, np.random.default_rng([seed, i]))
        runs[start] = {
            "T_star_mid": decisions[1].T_star if len(decisions) > 1 else None,
            "terminal": env.terminal,
            "return": float(np.sum(rewards))
        }

    checks = {
        "b_T_star": runs["b"]["T_star_mid"] == 1,
        "b_terminal": runs["b"]["terminal"] == "s_a1",
        "b_return": abs(runs["b"]["return"] - 1.5) < 1e-6,
        "a_T_star": runs["a"]["T_star_mid"] == 2,
        "a_terminal": runs["a"]["terminal"] == "s_a1",
        "a_return": abs(runs["a"]["return"] - 1.0) < 1e-6,
        "R_hat_mid": 0.9 <= r_mid <= 1.1,
        "R_hat_mid_b_prefix": -0.1 <= r_mid_b <= 0.1
    }
    return {
        "seed": seed,
        "passed": all(checks.values()),
        "checks": checks,
        "runs": runs,
        "R_hat": {"mid_T1": r_mid, "mid_T2_b_prefix": r_mid_b, "mid_T2_a_prefix": r_mid_a},
        "action_accuracy": batch_action_accuracy(model, ds, T=T, seed=seed)
    }
