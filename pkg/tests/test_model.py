from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest
import torch

from mrCore.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from mrCore.model import (
    ModelConfig, ModelError, apply_freeze, collate, count_parameters, embed_window, forward, init_model,
    load_model, parameter_checksum, save_model
)
from mrCore.trajectory import BatchSampler, WindowError, make_window


def _batch(ds, T=4, n=5, seed=0):
    return collate(BatchSampler(ds, seed).sample(n, T, vary_length=True))


def _long_traj(ds, n=4):
    return next(tr for tr in ds.trajectories if len(tr) >= n)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ModelError):
        ModelConfig(freeze_mode="lora", lora_rank=0)
    with pytest.raises(ModelError):
        ModelConfig(return_bins=(1.0, 0.0))
    with pytest.raises(ModelError, match="unknown model config keys"):
        ModelConfig.from_dict({"d_model": 64, "width": 3})


def test_forward_shapes(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0)
    out = model(_batch(small_dataset))
    assert out["action_logits"].shape == (5, 4, tiny_cfg.n_items)
    assert out["return_logits"].shape == (5, 4, tiny_cfg.n_bins)
    assert out["expectile"].shape == (5, 4)
    assert out["expectile_value"].shape == (5,)
    assert out["reward_pred"].shape == (5, 4)
    assert torch.isfinite(out["expectile"]).all()
    probs = torch.softmax(out["return_logits"], dim=-1).sum(-1)
    torch.testing.assert_close(probs, torch.ones_like(probs))


def test_embedding_layout(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0)
    w = make_window(_long_traj(small_dataset), 3, 3)
    assert embed_window(model, w).shape == (9, tiny_cfg.d_model)


def test_mlp_embedder_with_zero_output_layer(tiny_cfg, small_dataset):
    model = init_model(replace(tiny_cfg, embed_kind="mlp"), seed=0)
    d = tiny_cfg.d_model
    biases = []
    with torch.no_grad():
        for k, emb in enumerate((model.state_emb, model.return_emb, model.action_emb)):
            emb[2].weight.zero_()
            emb[2].bias.copy_(torch.full((d,), float(k + 1)))
            biases.append(emb[2].bias.clone())
        model.pos_emb.weight.zero_()
    tok = embed_window(model, make_window(_long_traj(small_dataset), 3, 3))
    expected = torch.stack(biases).repeat(3, 1)
    torch.testing.assert_close(tok, expected)


def test_window_longer_than_context(tiny_cfg, small_dataset):
    model = init_model(replace(tiny_cfg, T_max=2), seed=0)
    with pytest.raises(WindowError):
        model(_batch(small_dataset, T=3))


def test_causal_outputs(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0).eval()
    w = make_window(_long_traj(small_dataset), 3, 4)
    base = forward(model, w)

    # the newest action token comes after every head readout of its step
    changed = make_window(_long_traj(small_dataset), 3, 4)
    changed.actions[-1] = (changed.actions[-1] + 1) % tiny_cfg.n_items
    out = forward(model, changed)
    for key in base:
        torch.testing.assert_close(out[key], base[key])

    # the newest state token only moves the newest position
    changed = make_window(_long_traj(small_dataset), 3, 4)
    changed.states[-1] = changed.states[-1] + 1.0
    out = forward(model, changed)
    torch.testing.assert_close(out["expectile"][:-1], base["expectile"][:-1])
    torch.testing.assert_close(out["action_logits"][:-1], base["action_logits"][:-1])
    assert not torch.equal(out["expectile"][-1], base["expectile"][-1])


def test_return_token_reaches_action_not_expectile(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0).eval()
    w = make_window(_long_traj(small_dataset), 2, 3)
    base = forward(model, w)
    changed = make_window(_long_traj(small_dataset), 2, 3)
    changed.rtg[-1] = changed.rtg[-1] + 5.0
    out = forward(model, changed)
    torch.testing.assert_close(out["expectile"], base["expectile"])
    assert not torch.equal(out["action_logits"][-1], base["action_logits"][-1])


def test_left_padding_is_invisible(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0).eval()
    w = make_window(_long_traj(small_dataset), 2, 2)
    plain = forward(model, w)
    padded = forward(model, w.left_pad(5))
    torch.testing.assert_close(padded["expectile"][-2:], plain["expectile"], atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(padded["action_logits"][-2:], plain["action_logits"], atol=1e-5, rtol=1e-5)


def test_init_is_seeded(tiny_cfg):
    a = parameter_checksum(init_model(tiny_cfg, seed=1))
    b = parameter_checksum(init_model(tiny_cfg, seed=1))
    c = parameter_checksum(init_model(tiny_cfg, seed=2))
    assert a == b
    assert a != c


def test_forward_counter(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0)
    model(_batch(small_dataset))
    model(_batch(small_dataset))
    assert model.forward_calls == 2


def test_save_and_load(tmp_path, tiny_cfg, small_dataset):
    model = init_model(replace(tiny_cfg, lora_rank=2, freeze_mode="lora"), seed=0).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "lora_B" in name:
                p.normal_()
    path = str(tmp_path / "m.ckpt")
    save_model(model, path, {"variant": "full"})
    loaded = load_model(path)
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert loaded.extra["variant"] == "full"
    assert loaded.freeze_mode == "lora"
    batch = _batch(small_dataset)
    torch.testing.assert_close(loaded(batch)["action_logits"], model(batch)["action_logits"])


def test_load_missing_tensor(tmp_path, tiny_cfg):
    model = init_model(tiny_cfg, seed=0)
    path = str(tmp_path / "m.ckpt")
    save_model(model, path)
    header, tensors = read_checkpoint(path)
    del tensors["expectile_head.weight"]
    write_checkpoint(path, header["cfg"], tensors, header["extra"])
    with pytest.raises(CheckpointError, match="expectile_head.weight"):
        load_model(path)


def test_prior_must_fit(tiny_cfg):
    prior = init_model(replace(tiny_cfg, d_model=32, d_ff=64), seed=0)
    tensors = OrderedDict((k, v) for k, v in prior.state_dict().items())
    with pytest.raises(CheckpointError, match="dimension mismatch"):
        init_model(tiny_cfg, prior=tensors, seed=0)


def test_prior_copies_backbone(tiny_cfg):
    cfg = replace(tiny_cfg, lm_vocab=10, lm_context=8)
    prior = init_model(cfg, seed=5)
    model = init_model(cfg, prior=prior.state_dict(), seed=6)
    torch.testing.assert_close(model.blocks[0].attn.q_proj.weight, prior.blocks[0].attn.q_proj.weight)
    torch.testing.assert_close(model.lm_wte.weight, prior.lm_wte.weight)
    assert not torch.equal(model.action_gen.weight, prior.action_gen.weight)


def test_freeze_modes(tiny_cfg):
    model = init_model(tiny_cfg, seed=0)
    apply_freeze(model, "frozen")
    counts = count_parameters(model)
    assert counts["trainable"] == counts["total"] - counts["backbone"]
    assert "blocks" not in counts["trainable_groups"]
    with pytest.raises(ModelError):
        apply_freeze(model, "lora")
    apply_freeze(model, "full")
    assert count_parameters(model)["trainable"] == counts["total"]


def test_lm_forward(tiny_cfg):
    model = init_model(replace(tiny_cfg, lm_vocab=12, lm_context=8), seed=0)
    ids = torch.as_tensor(np.arange(16).reshape(2, 8) % 12)
    assert model.lm_forward(ids).shape == (2, 8, 12)
    with pytest.raises(ModelError):
        model.lm_forward(torch.zeros(1, 9, dtype=torch.int64))
    with pytest.raises(ModelError):
        init_model(tiny_cfg, seed=0).lm_forward(ids)
