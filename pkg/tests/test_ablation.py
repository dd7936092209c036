import os
from dataclasses import replace

import numpy as np
import pytest

from mrCore.config import model_config, resolve_config, search_config, train_config, world_spec
from mrCore.envsim import build_world, gen_mixed_data
from mrCore.evaluation import rollout_eval
from mrCore.lmprior import load_corpus, pretrain_lm
from mrCore.model import init_model
from mrCore.trainer import train

CORPUS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "share", "corpus.txt")
SEEDS = (0, 1, 2)


def _variant_return(cfg, variant, seed, ds, world, corpus, prior):
    dims = dict(state_dim=ds.state_dim, n_items=ds.catalog_size, return_bins=tuple(ds.return_bins),
                rtg_scale=ds.rtg_scale)
    tcfg = replace(train_config(cfg), seed=seed)
    scfg = search_config(cfg)
    if variant == "no-lm":
        mcfg = model_config(cfg, lm_vocab=0, freeze_mode="full", **dims)
        model = init_model(mcfg, None, seed)
        tcfg = replace(tcfg, aux_language=False)
        corpus = None
    else:
        lm_dims = dict(lm_vocab=prior.cfg.lm_vocab, lm_context=prior.cfg.lm_context)
        embed = "linear" if variant == "linear" else "mlp"
        mcfg = model_config(cfg, embed_kind=embed, **dims, **lm_dims)
        model = init_model(mcfg, prior.state_dict(), seed)
    if variant == "no-max":
        tcfg = replace(tcfg, max_head=False)
        scfg = replace(scfg, max_head=False)
    train(model, ds, corpus, tcfg)
    return rollout_eval(model, world, cfg["search"]["n_envs"], 1, scfg, seed)["R_avg"]["mean"]


@pytest.mark.slow
def test_ablation_ordering():
    cfg = resolve_config({"world": {"episodes": 300}, "train": {"steps": 2000, "log_every": 0}})
    world = build_world(world_spec(cfg))
    corpus = load_corpus(CORPUS)
    results = {v: [] for v in ("full", "no-max", "no-lm", "linear")}
    for seed in SEEDS:
        ds = gen_mixed_data(world, cfg["world"]["eps_mix"], cfg["world"]["episodes"], seed,
                            n_bins=cfg["world"]["return_bins"])
        prior, _ = pretrain_lm(model_config(cfg), corpus, 500, 1e-3, seed)
        for variant in results:
            results[variant].append(_variant_return(cfg, variant, seed, ds, world, corpus, prior))

    means = {v: float(np.mean(r)) for v, r in results.items()}
    assert means["full"] >= means["no-max"], results
    assert means["full"] >= means["no-lm"], results
    assert means["full"] >= means["linear"], results
