import hashlib
import json
import logging

import numpy as np


def setup_log(name:str) -> logging.Logger:
    log = logging.getLogger(name)
    if log.handlers:
        return log
    log.setLevel(logging.DEBUG)
    # log.setLevel(logging.WARNING)
    # log.setLevel(logging.INFO)
    formatter = logging.Formatter('[%(levelname)s] %(message)s')
    handler = logging.StreamHandler()
    handler.setFormatter(formatter)
    log.addHandler(handler)
    return log


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def digest(obj) -> str:
    """
    SHA-256 of the canonical JSON form of ``obj``.

    :param obj: Any JSON-serializable structure.
    :return: Hex digest.
    :rtype: str
    """
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def derive_seeds(seed, n):
    """
    Independent child seeds for ``n`` workers, derived from ``seed``.

    :param seed: Root seed.
    :param n: Number of children.
    :return: List of ``n`` integers.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def progress_enabled(log):
    return log.isEnabledFor(logging.INFO)


def set_level(level, prefix="mrCore"):
    """
    Sets the level of every logger created under ``prefix``.
    """
    for name in list(logging.root.manager.loggerDict):
        if name == prefix or name.startswith(prefix + "."):
            logging.getLogger(name).setLevel(level)
