from dataclasses import replace

import pytest
import torch

from mrCore.lora import LoRAError, has_lora, lora_attach, lora_merge
from mrCore.model import (
    ModelConfig, backbone_checksum, collate, count_parameters, init_model, parameter_checksum
)
from mrCore.trainer import TrainConfig, train
from mrCore.trajectory import BatchSampler


def _batch(ds):
    return collate(BatchSampler(ds, 3).sample(6, 4, vary_length=True))


def test_attach_is_identity(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0).eval()
    batch = _batch(small_dataset)
    before = model(batch)
    lora_attach(model, 4, 8.0, seed=1)
    after = model(batch)
    assert has_lora(model)
    for key in ("action_logits", "expectile", "return_logits"):
        assert (after[key] - before[key]).abs().max() < 1e-6


def test_merge_matches_adapters(tiny_cfg, small_dataset):
    model = init_model(tiny_cfg, seed=0).eval()
    lora_attach(model, 4, 8.0, seed=1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "lora_B" in name:
                p.normal_(0.0, 0.1)
    batch = _batch(small_dataset)
    adapted = model(batch)
    lora_merge(model)
    merged = model(batch)
    assert not has_lora(model)
    for key in ("action_logits", "expectile", "return_logits"):
        assert (merged[key] - adapted[key]).abs().max() < 1e-5


def test_attach_errors(tiny_cfg):
    model = init_model(tiny_cfg, seed=0)
    with pytest.raises(LoRAError):
        lora_attach(model, 0, 1.0)
    with pytest.raises(LoRAError, match="too large"):
        lora_attach(model, tiny_cfg.d_model, 1.0)
    lora_attach(model, 2, 4.0)
    with pytest.raises(LoRAError, match="already attached"):
        lora_attach(model, 2, 4.0)
    lora_merge(model)
    with pytest.raises(LoRAError, match="no adapters"):
        lora_merge(model)


@pytest.mark.parametrize("mode", ["lora", "frozen"])
def test_frozen_backbone_does_not_move(mode, tiny_cfg, small_dataset):
    cfg = replace(tiny_cfg, lora_rank=2 if mode == "lora" else 0, freeze_mode=mode)
    model = init_model(cfg, seed=0)
    before = backbone_checksum(model)
    everything = parameter_checksum(model)
    train(model, small_dataset, None, TrainConfig(steps=5, batch=8, aux_language=False, log_every=0), T=4)
    assert backbone_checksum(model) == before
    assert parameter_checksum(model) != everything


def test_adapter_parameter_share():
    cfg = ModelConfig(n_layers=2, d_model=64, d_ff=128, lora_rank=4, freeze_mode="lora",
                      state_dim=16, n_items=50, return_bins=tuple(range(33)))
    counts = count_parameters(init_model(cfg, seed=0))
    assert counts["lora"] == 2 * 3 * (4 * 64 + 64 * 4)
    assert counts["lora"] < 0.1 * counts["total"]
    assert "blocks" not in counts["trainable_groups"]
    assert "lora" in counts["trainable_groups"]
