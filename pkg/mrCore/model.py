############################################################
# misret: offline return-conditioned recommendation        #
# Causal transformer policy with token embeddings, four    #
# output heads and optional language-model projections.    #
############################################################

import hashlib
import math
from dataclasses import dataclass, asdict, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .lora import has_lora, lora_attach
from .trajectory import WindowError
from .utils import setup_log

log = setup_log("mrCore.model")

EMBED_KINDS = ("mlp", "linear")
FREEZE_MODES = ("lora", "frozen", "full")
BACKBONE_PREFIXES = ("blocks.", "ln_f.")
LM_PREFIXES = ("lm_wte.", "lm_wpe.", "lm_head.")


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    T_max: int = 20
    state_dim: int = 16
    n_items: int = 50
    return_bins: tuple = (0.0, 1.0)
    dropout: float = 0.1
    embed_kind: str = "mlp"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    freeze_mode: str = "lora"
    lm_vocab: int = 0
    lm_context: int = 60
    rtg_scale: float = 1.0

    def __post_init__(self):
        self.return_bins = tuple(float(b) for b in self.return_bins)
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model %d is not divisible by n_heads %d" % (self.d_model, self.n_heads))
        if self.T_max < 1:
            raise ModelError("T_max must be >= 1")
        if self.embed_kind not in EMBED_KINDS:
            raise ModelError("embed_kind must be one of %s, got %r" % (EMBED_KINDS, self.embed_kind))
        if self.freeze_mode not in FREEZE_MODES:
            raise ModelError("freeze_mode must be one of %s, got %r" % (FREEZE_MODES, self.freeze_mode))
        if self.lora_rank < 0 or (self.lora_rank > 0 and self.lora_rank >= self.d_model):
            raise ModelError("lora_rank must satisfy 0 <= r < d_model, got %d" % self.lora_rank)
        if self.freeze_mode == "lora" and self.lora_rank == 0:
            raise ModelError("freeze_mode 'lora' needs lora_rank > 0")
        if len(self.return_bins) < 2 or np.any(np.diff(self.return_bins) <= 0):
            raise ModelError("return bin edges must be strictly increasing")
        if self.rtg_scale <= 0:
            raise ModelError("rtg_scale must be positive")

    @property
    def n_bins(self):
        return len(self.return_bins) - 1

    def to_dict(self):
        d = asdict(self)
        d["return_bins"] = list(self.return_bins)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelError("unknown model config keys: %s" % ", ".join(sorted(unknown)))
        return cls(**d)


@dataclass
class WindowBatch:
    states: torch.Tensor    # [B, T, d_s]
    rtg: torch.Tensor       # [B, T]
    actions: torch.Tensor   # [B, T] int64
    rewards: torch.Tensor   # [B, T]
    mask: torch.Tensor      # [B, T] bool, False on pads

    @property
    def T(self):
        return self.actions.shape[1]


def collate(windows, dtype=torch.float32):
    """
    Stacks equally long ContextWindows into a WindowBatch.
    """
    lengths = {w.T for w in windows}
    if len(lengths) != 1:
        raise WindowError("cannot collate windows of lengths %s" % sorted(lengths))
    return WindowBatch(
        states=torch.as_tensor(np.stack([w.states for w in windows]), dtype=dtype),
        rtg=torch.as_tensor(np.stack([w.rtg for w in windows]), dtype=dtype),
        actions=torch.as_tensor(np.stack([w.actions for w in windows]), dtype=torch.int64),
        rewards=torch.as_tensor(np.stack([w.rewards for w in windows]), dtype=dtype),
        mask=torch.as_tensor(np.stack([w.mask for w in windows]), dtype=torch.bool)
    )


class CausalSelfAttention(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_model = cfg.d_model
        # separate projections so Q, K and V can carry adapters
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.o_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.resid_dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, allowed):
        B, L, C = x.size()
        hs = C // self.n_heads
        q = self.q_proj(x).view(B, L, self.n_heads, hs).transpose(1, 2)
        k = self.k_proj(x).view(B, L, self.n_heads, hs).transpose(1, 2)
        v = self.v_proj(x).view(B, L, self.n_heads, hs).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(hs))
        att = att.masked_fill(~allowed[:, None, :, :], float('-inf'))
        att = F.softmax(att, dim=-1)
        att = self.attn_dropout(att)
        y = (att @ v).transpose(1, 2).contiguous().view(B, L, C)
        return self.resid_dropout(self.o_proj(y))


class MLP(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        self.c_fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.gelu = nn.GELU()
        self.c_proj = nn.Linear(cfg.d_ff, cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        return self.dropout(self.c_proj(self.gelu(self.c_fc(x))))


class Block(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln_1(x), allowed)
        x = x + self.mlp(self.ln_2(x))
        return x


def _token_embedder(kind, d_in, d_model):
    if kind == "mlp":
        return nn.Sequential(nn.Linear(d_in, d_model), nn.GELU(), nn.Linear(d_model, d_model))
    return nn.Linear(d_in, d_model)


class PolicyModel(nn.Module):
    """
    Return-conditioned policy over (s, R, a) token triplets.

    Heads:

    * ``state_head`` (s_p) and ``return_head`` / ``expectile_head`` read the s_t token.
    * ``action_feat_head`` (a_p) reads the R_t token.
    * ``reward_net`` estimates r_t from [s_p || a_p].
    * ``action_gen`` produces item logits from [r_hat || a_p].
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model

        self.state_emb = _token_embedder(cfg.embed_kind, cfg.state_dim, d)
        self.return_emb = _token_embedder(cfg.embed_kind, 1, d)
        self.action_emb = _token_embedder(cfg.embed_kind, cfg.n_items, d)
        self.pos_emb = nn.Embedding(cfg.T_max, d)
        self.pad_emb = nn.Parameter(torch.zeros(d))
        self.embed_ln = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(d)

        self.state_head = nn.Linear(d, d)
        self.action_feat_head = nn.Linear(d, d)
        self.reward_net = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))
        self.action_gen = nn.Linear(d + 1, cfg.n_items)
        self.return_head = nn.Linear(d, cfg.n_bins)
        self.expectile_head = nn.Linear(d, 1)

        if cfg.lm_vocab > 0:
            self.lm_wte = nn.Embedding(cfg.lm_vocab, d)
            self.lm_wpe = nn.Embedding(cfg.lm_context, d)
            self.lm_head = nn.Linear(d, cfg.lm_vocab, bias=False)

        self.detach_max = False
        self.forward_calls = 0
        self.freeze_mode = "full"
        self.extra = {}

        self.apply(self._init_weights)
        nn.init.normal_(self.pad_emb, mean=0.0, std=0.02)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @property
    def has_lm(self):
        return self.cfg.lm_vocab > 0

    @property
    def dtype(self):
        return self.pad_emb.dtype

    def embed(self, batch):
        """
        :return: (tokens [B, 3T, d_model], valid [B, 3T])
        """
        B, T = batch.actions.shape
        if T > self.cfg.T_max:
            raise WindowError("window of %d steps exceeds T_max=%d" % (T, self.cfg.T_max))
        states = batch.states.to(self.dtype)
        s = self.state_emb(states)
        r = self.return_emb((batch.rtg.to(self.dtype) / self.cfg.rtg_scale).unsqueeze(-1))
        a = self.action_emb(F.one_hot(batch.actions, self.cfg.n_items).to(self.dtype))

        # positions count from the first real step
        n_pad = (~batch.mask).sum(dim=1, keepdim=True)
        pos = (torch.arange(T, device=n_pad.device).unsqueeze(0) - n_pad).clamp(min=0)
        p = self.pos_emb(pos)

        tok = torch.stack([s + p, r + p, a + p], dim=2)
        tok = torch.where(batch.mask[:, :, None, None], tok, self.pad_emb.expand_as(tok))
        return tok.reshape(B, 3 * T, -1), batch.mask.repeat_interleave(3, dim=1)

    @staticmethod
    def attention_mask(valid):
        """
        Causal over valid keys. Pad queries attend to themselves only.
        """
        L = valid.shape[1]
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=valid.device))
        eye = torch.eye(L, dtype=torch.bool, device=valid.device)
        return (causal[None] & valid[:, None, :]) | eye[None]

    def backbone(self, x, allowed):
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_f(x)

    def forward(self, batch):
        self.forward_calls += 1
        tok, valid = self.embed(batch)
        h = self.backbone(self.drop(self.embed_ln(tok)), self.attention_mask(valid))

        h_s = h[:, 0::3]
        h_r = h[:, 1::3]
        s_p = self.state_head(h_s)
        a_p = self.action_feat_head(h_r)
        r_hat = self.reward_net(torch.cat([s_p, a_p], dim=-1)).squeeze(-1)
        logits = self.action_gen(torch.cat([r_hat.unsqueeze(-1), a_p], dim=-1))
        h_max = h_s.detach() if self.detach_max else h_s
        expectile = self.expectile_head(h_max).squeeze(-1) * self.cfg.rtg_scale

        return {
            "action_logits": logits,
            "reward_pred": r_hat,
            "state_pred": s_p,
            "action_feat": a_p,
            "return_logits": self.return_head(h_s),
            "expectile": expectile,
            "expectile_value": expectile[:, -1]
        }

    def lm_forward(self, ids):
        """
        Next-token logits through the shared backbone with the LM projections
        substituted for the token embeddings and heads.

        :param ids: [B, L] token ids.
        :return: [B, L, lm_vocab] logits.
        """
        if not self.has_lm:
            raise ModelError("model has no language-model projections")
        L = ids.shape[1]
        if L > self.cfg.lm_context:
            raise ModelError("token window of %d exceeds lm_context=%d" % (L, self.cfg.lm_context))
        pos = torch.arange(L, device=ids.device)
        x = self.drop(self.lm_wte(ids) + self.lm_wpe(pos)[None])
        allowed = torch.tril(torch.ones(L, L, dtype=torch.bool, device=ids.device))[None]
        return self.lm_head(self.backbone(x, allowed))


def embed_window(model, window):
    """
    :return: [3T, d_model] token embeddings of a single window.
    """
    tok, _ = model.embed(collate([window], dtype=model.dtype))
    return tok[0]


def forward(model, window):
    """
    Forward pass of a single ContextWindow, batch axis removed.
    """
    out = model(collate([window], dtype=model.dtype))
    return {k: v[0] for k, v in out.items()}


def is_backbone(name):
    return name.startswith(BACKBONE_PREFIXES)


def copy_prior(model, tensors):
    """
    Copies backbone and LM projection tensors from a prior checkpoint.

    :raises CheckpointError: listing every mismatched or missing tensor.
    """
    params = dict(model.named_parameters())
    wanted = [n for n in params if n.startswith(BACKBONE_PREFIXES + LM_PREFIXES) and "lora_" not in n]
    missing = [n for n in wanted if n not in tensors and is_backbone(n)]
    mismatched = [n for n in wanted if n in tensors and tuple(tensors[n].shape) != tuple(params[n].shape)]
    if missing or mismatched:
        parts = []
        if mismatched:
            parts.append("dimension mismatch: %s" % ", ".join(mismatched))
        if missing:
            parts.append("missing: %s" % ", ".join(missing))
        raise CheckpointError("prior checkpoint does not fit the model (%s)" % "; ".join(parts))

    copied = 0
    with torch.no_grad():
        for n in wanted:
            if n in tensors:
                params[n].copy_(tensors[n].to(params[n].dtype))
                copied += 1
            else:
                log.warning("Prior checkpoint has no %s, keeping random init" % n)
    log.debug("Copied %d prior tensors" % copied)


def apply_freeze(model, mode):
    """
    * full: everything trains.
    * frozen: backbone fixed, embeddings and heads train.
    * lora: backbone fixed except adapters, embeddings and heads train.
    """
    if mode not in FREEZE_MODES:
        raise ModelError("unknown freeze mode %r" % mode)
    if mode == "lora" and not has_lora(model):
        raise ModelError("freeze mode 'lora' needs attached adapters")
    for name, p in model.named_parameters():
        if mode == "full" or not is_backbone(name):
            p.requires_grad_(True)
        elif mode == "frozen":
            p.requires_grad_(False)
        else:
            p.requires_grad_("lora_" in name)
    model.freeze_mode = mode
    return model


def init_model(cfg, prior=None, seed=0):
    """
    :param cfg: Model configuration.
    :type cfg: ModelConfig
    :param prior: Prior checkpoint path or name -> tensor mapping, or None.
    :param seed: Seed for every random initialization.
    :rtype: PolicyModel
    """
    torch.manual_seed(seed)
    model = PolicyModel(cfg)
    if prior is not None:
        tensors = read_checkpoint(prior)[1] if isinstance(prior, str) else prior
        copy_prior(model, tensors)
    if cfg.lora_rank > 0:
        lora_attach(model, cfg.lora_rank, cfg.lora_alpha, seed=seed)
    apply_freeze(model, cfg.freeze_mode)
    return model


def count_parameters(model):
    """
    :return: dict with total, trainable, lora, backbone and trainable_groups.
    """
    report = {"total": 0, "trainable": 0, "lora": 0, "backbone": 0}
    groups = set()
    for name, p in model.named_parameters():
        n = p.numel()
        report["total"] += n
        if "lora_" in name:
            report["lora"] += n
        elif is_backbone(name):
            report["backbone"] += n
        if p.requires_grad:
            report["trainable"] += n
            groups.add("lora" if "lora_" in name else name.split(".")[0])
    report["trainable_groups"] = sorted(groups)
    return report


def parameter_checksum(model, predicate=None):
    """
    SHA-256 over the float32 bytes of every parameter, in name order.
    """
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        if predicate is not None and not predicate(name):
            continue
        h.update(name.encode('utf-8'))
        h.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def backbone_checksum(model):
    return parameter_checksum(model, lambda n: is_backbone(n) and "lora_" not in n)


def save_model(model, path, extra=None):
    meta = dict(model.extra)
    meta.update(extra or {})
    meta["lora_attached"] = has_lora(model)
    write_checkpoint(path, model.cfg.to_dict(), model.state_dict(), meta)


def load_model(path):
    """
    :raises CheckpointError: on a bad header, version or missing tensor.
    """
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["cfg"])
    except (ModelError, TypeError) as err:
        raise CheckpointError("invalid model config in %s: %s" % (path, err))

    model = PolicyModel(cfg)
    if header.get("extra", {}).get("lora_attached"):
        lora_attach(model, cfg.lora_rank, cfg.lora_alpha)

    expected = model.state_dict()
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError("checkpoint %s is missing tensor %s" % (path, ", ".join(missing)))
    unexpected = [n for n in tensors if n not in expected]
    if unexpected:
        raise CheckpointError("checkpoint %s has unexpected tensor %s" % (path, ", ".join(unexpected)))
    for n, t in tensors.items():
        if tuple(t.shape) != tuple(expected[n].shape):
            raise CheckpointError("tensor %s has shape %s, expected %s"
                                  % (n, tuple(t.shape), tuple(expected[n].shape)))

    model.load_state_dict(tensors)
    model.extra = dict(header.get("extra", {}))
    if cfg.freeze_mode != "lora" or has_lora(model):
        apply_freeze(model, cfg.freeze_mode)
    model.eval()
    return model
