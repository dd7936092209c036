############################################################
# misret: offline return-conditioned recommendation        #
# Loss terms: expectile, reward, action, return bins,      #
# language and their weighted total.                       #
############################################################

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import brentq

from .utils import setup_log

log = setup_log("mrCore.losses")

BREAKDOWN_TERMS = ("L_Ne", "L_Ng", "L_lang", "L_max", "L_bin")


class LossError(Exception):
    pass


class NumericalError(Exception):
    pass


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise LossError("expectile level must lie in (0, 1), got %r" % alpha)


def expectile_penalty(u, alpha):
    """
    |alpha - 1(u < 0)| * u^2

    :param u: Residual, float, numpy array or torch tensor.
    :param alpha: Expectile level in (0, 1).
    """
    _check_alpha(alpha)
    if isinstance(u, torch.Tensor):
        weight = torch.where(u < 0, torch.full_like(u, 1.0 - alpha), torch.full_like(u, alpha))
        return weight * u ** 2
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u < 0, 1.0 - alpha, alpha) * u ** 2
    return float(out) if out.ndim == 0 else out


def _masked_mean(values, mask):
    if mask is None:
        return values.mean()
    mask = mask.to(values.dtype)
    return (values * mask).sum() / mask.sum().clamp(min=1.0)


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise LossError("%s: length mismatch %s vs %s" % (what, tuple(a.shape), tuple(b.shape)))


def expectile_loss(pred, target, alpha, mask=None):
    """
    Mean asymmetric squared error with residual u = target - pred, so
    under-estimating a return weighs alpha and over-estimating 1 - alpha.
    """
    _same_shape(pred, target, "expectile_loss")
    return _masked_mean(expectile_penalty(target - pred, alpha), mask)


def expectile_minimizer(returns, alpha):
    """
    Scalar m minimizing the empirical expectile loss of ``returns``.

    The loss is strictly convex in m, so the root of its derivative on
    [min, max] is the minimizer.
    """
    _check_alpha(alpha)
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise LossError("expectile of an empty multiset")
    lo, hi = float(r.min()), float(r.max())
    if hi - lo <= 0:
        return lo

    def slope(m):
        u = r - m
        return float(np.sum(np.where(u < 0, 1.0 - alpha, alpha) * u))

    return brentq(slope, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps)


def reward_loss(pred, target, mask=None):
    """
    L_Ne: mean squared error between estimated and observed rewards.
    """
    _same_shape(pred, target, "reward_loss")
    return _masked_mean((target - pred) ** 2, mask)


def action_loss(logits, targets, mask=None):
    """
    L_Ng: mean negative log-likelihood of the logged actions.

    :param logits: [..., N_items]
    :param targets: [...] item indices.
    """
    if tuple(logits.shape[:-1]) != tuple(targets.shape):
        raise LossError("action_loss: length mismatch %s vs %s"
                        % (tuple(logits.shape[:-1]), tuple(targets.shape)))
    n_items = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= n_items):
        raise LossError("action_loss: target outside [0, %d)" % n_items)
    nll = F.cross_entropy(logits.reshape(-1, n_items), targets.reshape(-1), reduction='none')
    return _masked_mean(nll.reshape(targets.shape), mask)


def return_bin_index(target, bins):
    edges = torch.as_tensor(np.asarray(bins, dtype=np.float64), dtype=target.dtype, device=target.device)
    clamped = target.clamp(min=float(edges[0]), max=float(edges[-1]))
    idx = torch.bucketize(clamped, edges, right=True) - 1
    return idx.clamp(0, len(edges) - 2)


def return_bin_loss(logits, target_rtg, bins, mask=None):
    """
    Cross-entropy of the return-bin head against the bin of the observed
    return-to-go. Targets outside the bin range are clamped.
    """
    if tuple(logits.shape[:-1]) != tuple(target_rtg.shape):
        raise LossError("return_bin_loss: length mismatch")
    idx = return_bin_index(target_rtg, bins)
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), idx.reshape(-1), reduction='none')
    return _masked_mean(nll.reshape(target_rtg.shape), mask)


def language_loss(model, tokens):
    """
    Mean next-token negative log-likelihood of ``tokens`` ([B, L], L >= 2)
    under the backbone with the LM projections.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.int64)
    if tokens.ndim == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[1] < 2:
        raise LossError("language_loss needs windows of at least 2 tokens")
    logits = model.lm_forward(tokens[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))


def total_loss(model, batch, lang_batch, cfg):
    """
    L = L_Ne + L_Ng + lam * L_language + L_max + L_bin.

    :param model: PolicyModel.
    :param batch: WindowBatch of RL windows.
    :param lang_batch: Token windows or None.
    :param cfg: TrainConfig.
    :return: (total loss tensor, breakdown dict of floats)
    """
    out = model(batch)
    mask = batch.mask
    rewards = batch.rewards.to(out["reward_pred"].dtype)
    rtg = batch.rtg.to(out["expectile"].dtype)

    terms = {
        "L_Ne": reward_loss(out["reward_pred"], rewards, mask),
        "L_Ng": action_loss(out["action_logits"], batch.actions, mask),
        "L_bin": return_bin_loss(out["return_logits"], rtg, model.cfg.return_bins, mask)
    }
    zero = terms["L_Ne"].new_zeros(())
    if cfg.aux_language and lang_batch is not None and model.has_lm:
        terms["L_lang"] = cfg.lam * language_loss(model, lang_batch)
    else:
        terms["L_lang"] = zero
    if cfg.max_head:
        terms["L_max"] = expectile_loss(out["expectile"], rtg, cfg.alpha, mask)
    else:
        terms["L_max"] = zero

    total = terms["L_Ne"] + terms["L_Ng"] + terms["L_lang"] + terms["L_max"] + terms["L_bin"]
    breakdown = {k: float(terms[k].detach()) for k in BREAKDOWN_TERMS}
    breakdown["L_total"] = float(total.detach())
    return total, breakdown


def check_finite(breakdown, step):
    """
    :raises NumericalError: naming the step and the first non-finite term.
    """
    for term in ("L_total",) + BREAKDOWN_TERMS:
        if not math.isfinite(breakdown[term]):
            bad = [t for t in BREAKDOWN_TERMS if not math.isfinite(breakdown[t])]
            raise NumericalError("non-finite loss at step %d in term %s"
                                 % (step, bad[0] if bad else term))
