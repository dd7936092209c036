############################################################
# misret: offline return-conditioned recommendation        #
# Experiment configuration: defaults, validation, digest   #
# and typed builders.                                      #
############################################################

import copy
import json
from dataclasses import fields

from .envsim import WorldSpec
from .inference import SearchConfig
from .model import ModelConfig
from .trainer import TrainConfig
from .utils import digest, setup_log

log = setup_log("mrCore.config")


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "world": {
        "n_users": 200,
        "n_items": 50,
        "d_f": 8,
        "k": 10,
        "max_steps": 30,
        "quit_patience": 3,
        "quit_threshold": 1.0,
        "r_max": 5.0,
        "reward_scale": 5.0,
        "noise_sigma": 0.1,
        "repeat_decay": 0.5,
        "seed": 0,
        "source": "latent",
        "mf_observed": 0.3,
        "mf_noise": 0.1,
        "mf_epochs": 20,
        "mf_reg": 0.1,
        "episodes": 1000,
        "eps_mix": [[0.1, 0.5], [0.8, 0.5]],
        "gamma": 1.0,
        "return_bins": 32
    },
    "model": {
        "n_layers": 2,
        "n_heads": 2,
        "d_model": 64,
        "d_ff": 128,
        "T_max": 20,
        "dropout": 0.1,
        "embed_kind": "mlp",
        "lora_rank": 4,
        "lora_alpha": 8.0,
        "freeze_mode": "lora",
        "lm_context": 60
    },
    "train": {
        "alpha": 0.99,
        "lam": 0.1,
        "lr": 3e-4,
        "batch": 64,
        "steps": 20000,
        "grad_clip": 1.0,
        "checkpoint_every": 1000,
        "aux_language": True,
        "max_head": True,
        "max_stop_grad": False,
        "lm_batch": 16,
        "lm_length": 32,
        "log_every": 100,
        "init_prior": True,
        "lm_steps": 2000,
        "lm_lr": 1e-3,
        "lm_pretrain_batch": 32,
        "lm_pretrain_length": 48
    },
    "search": {
        "delta": 2,
        "kappa": 10.0,
        "action_mode": "greedy",
        "tie_break": "longest",
        "tie_tol": 0.05,
        "resample_each_step": True,
        "n_envs": 100,
        "episodes_per_env": 1,
        "workers": 0
    },
    "paths": {
        "dataset": "out/dataset.jsonl",
        "corpus": "share/corpus.txt",
        "prior": "out/prior.ckpt",
        "checkpoint": "out/model.ckpt",
        "metrics": "out/metrics.jsonl",
        "report": "out/eval.json"
    },
    "seed": 0
}

_NUMERIC = (int, float)


def _check_type(section, key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, _NUMERIC):
        ok = isinstance(value, _NUMERIC) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = float(value).is_integer()
            value = int(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError("%s.%s: expected %s, got %r" % (section, key, type(default).__name__, value))
    return value


def resolve_config(user=None):
    """
    Merges ``user`` over the defaults.

    :param user: Partial config dict, or None.
    :return: Fully resolved config.
    :raises ConfigError: on unknown sections or keys, wrong types or bad values.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    user = user or {}
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError("unknown config section '%s'" % section)
        if section == "seed":
            cfg["seed"] = _check_type("seed", "seed", values, DEFAULT_CONFIG["seed"])
            continue
        if not isinstance(values, dict):
            raise ConfigError("config section '%s' must be an object" % section)
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError("unknown config key '%s.%s'" % (section, key))
            cfg[section][key] = _check_type(section, key, value, DEFAULT_CONFIG[section][key])
    validate(cfg)
    return cfg


def validate(cfg):
    try:
        world_spec(cfg)
        model_config(cfg)
        train_config(cfg)
        search_config(cfg)
    except Exception as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err))
    w = cfg["world"]
    if not 0.0 <= w["gamma"] <= 1.0:
        raise ConfigError("world.gamma must lie in [0, 1]")
    if w["episodes"] < 1 or w["return_bins"] < 1:
        raise ConfigError("world.episodes and world.return_bins must be >= 1")
    for pair in w["eps_mix"]:
        if len(pair) != 2 or not 0.0 <= pair[0] <= 1.0 or pair[1] < 0:
            raise ConfigError("world.eps_mix entries must be [eps in [0, 1], fraction >= 0]")
    s = cfg["search"]
    if s["n_envs"] < 1 or s["episodes_per_env"] < 1 or s["workers"] < 0:
        raise ConfigError("search.n_envs and search.episodes_per_env must be >= 1, workers >= 0")


def load_config_file(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except IOError as err:
        raise ConfigError("could not read config file %s: %s" % (path, err))
    except json.JSONDecodeError as err:
        raise ConfigError("config file %s is not valid JSON: %s" % (path, err))


def config_digest(cfg):
    return digest(cfg)


def parse_value(text):
    """
    JSON literal when it parses as one, plain string otherwise.
    """
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_key(cfg, dotted):
    """
    ``section.key`` or a bare key that names exactly one entry.

    :return: (section, key); key is None for the scalar ``seed`` section.
    """
    if dotted == "seed":
        return "seed", None
    if "." in dotted:
        section, key = dotted.split(".", 1)
        if section not in cfg or not isinstance(cfg[section], dict) or key not in cfg[section]:
            raise ConfigError("unknown config key '%s'" % dotted)
        return section, key
    hits = [s for s, v in cfg.items() if isinstance(v, dict) and dotted in v]
    if len(hits) != 1:
        raise ConfigError("config key '%s' is %s" % (dotted, "ambiguous" if hits else "unknown"))
    return hits[0], dotted


def world_spec(cfg):
    names = {f.name for f in fields(WorldSpec)}
    return WorldSpec(**{k: v for k, v in cfg["world"].items() if k in names})


def model_config(cfg, **dataset_dims):
    """
    :param dataset_dims: state_dim, n_items, return_bins, rtg_scale, lm_vocab.
    """
    m = dict(cfg["model"])
    m.update(dataset_dims)
    return ModelConfig(**m)


def train_config(cfg):
    names = {f.name for f in fields(TrainConfig)}
    t = {k: v for k, v in cfg["train"].items() if k in names}
    return TrainConfig(seed=cfg["seed"], **t)


def search_config(cfg):
    names = {f.name for f in fields(SearchConfig)}
    s = {k: v for k, v in cfg["search"].items() if k in names}
    return SearchConfig(T_max=cfg["model"]["T_max"], max_head=cfg["train"]["max_head"], **s)
