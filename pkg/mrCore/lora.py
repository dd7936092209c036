############################################################
# misret: offline return-conditioned recommendation        #
# Low-rank adapters on the attention Q/K/V projections.    #
############################################################

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import setup_log

log = setup_log("mrCore.lora")

ADAPTED_PROJECTIONS = ("q_proj", "k_proj", "v_proj")


class LoRAError(Exception):
    pass


class LoRALinear(nn.Module):
    """
    y = x W^T + b + (alpha / r) * x A^T B^T

    Wraps an existing linear layer. ``weight`` and ``bias`` are the wrapped
    layer's own parameters, so their names do not change.
    """

    def __init__(self, base, rank, alpha, generator=None):
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank

        self.weight = base.weight
        self.bias = base.bias

        dtype = base.weight.dtype
        bound = 1.0 / math.sqrt(self.in_features)
        init_a = (torch.rand(rank, self.in_features, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound
        self.lora_A = nn.Parameter(init_a)
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged_weight(self):
        return self.weight + self.scaling * (self.lora_B @ self.lora_A)


def _projections(model):
    found = []
    for mod_name, mod in model.named_modules():
        for name in ADAPTED_PROJECTIONS:
            lin = getattr(mod, name, None)
            if isinstance(lin, (nn.Linear, LoRALinear)):
                found.append((mod_name, mod, name, lin))
    return found


def has_lora(model):
    return any(isinstance(lin, LoRALinear) for _, _, _, lin in _projections(model))


def lora_attach(model, r, alpha_scale, seed=None):
    """
    Adds B (zeros) and A (uniform) to every attention Q/K/V projection.

    :param model: Model to adapt in place.
    :param r: Adapter rank, 1 <= r < min(in, out) of every adapted matrix.
    :param alpha_scale: Adapter scaling numerator, the update is (alpha_scale / r) * B A.
    :param seed: Seed of the A initialization. Global torch RNG when None.
    :return: The same model.
    """
    if r < 1:
        raise LoRAError("LoRA rank must be >= 1, got %d" % r)
    targets = _projections(model)
    if not targets:
        raise LoRAError("model has no attention projections to adapt")

    for mod_name, _, name, lin in targets:
        if isinstance(lin, LoRALinear):
            raise LoRAError("LoRA already attached to %s.%s" % (mod_name, name))
        if r >= min(lin.in_features, lin.out_features):
            raise LoRAError("LoRA rank %d too large for %s.%s (%d x %d)"
                            % (r, mod_name, name, lin.out_features, lin.in_features))

    generator = torch.Generator().manual_seed(seed) if seed is not None else None
    for _, mod, name, lin in targets:
        setattr(mod, name, LoRALinear(lin, r, alpha_scale, generator=generator))
    log.debug("Attached rank-%d adapters to %d projections" % (r, len(targets)))
    return model


def lora_merge(model):
    """
    Folds W_0 + (alpha / r) B A into plain linear layers and removes the adapters.
    """
    merged = 0
    for _, mod, name, lin in _projections(model):
        if not isinstance(lin, LoRALinear):
            continue
        plain = nn.Linear(lin.in_features, lin.out_features, bias=lin.bias is not None,
                          dtype=lin.weight.dtype)
        with torch.no_grad():
            plain.weight.copy_(lin.merged_weight())
            if lin.bias is not None:
                plain.bias.copy_(lin.bias)
        plain.weight.requires_grad_(lin.weight.requires_grad)
        if lin.bias is not None:
            plain.bias.requires_grad_(lin.bias.requires_grad)
        setattr(mod, name, plain)
        merged += 1
    if merged == 0:
        raise LoRAError("no adapters to merge")
    return model
