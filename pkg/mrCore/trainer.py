############################################################
# misret: offline return-conditioned recommendation        #
# Optimization loop with clipping, checkpoints and a       #
# per-step JSON-lines metrics log.                         #
############################################################

import json
from dataclasses import dataclass, asdict

import torch
from tqdm import tqdm

from .lmprior import make_language_batch
from .losses import total_loss, check_finite
from .model import collate, save_model
from .trajectory import BatchSampler, TrajectoryError
from .utils import setup_log, progress_enabled

log = setup_log("mrCore.trainer")


class TrainConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.99
    lam: float = 0.1
    lr: float = 3e-4
    batch: int = 64
    steps: int = 20000
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    aux_language: bool = True
    max_head: bool = True
    max_stop_grad: bool = False
    lm_batch: int = 16
    lm_length: int = 32
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise TrainConfigError("alpha must lie in (0, 1), got %r" % self.alpha)
        if self.lam < 0:
            raise TrainConfigError("lam must be >= 0, got %r" % self.lam)
        if self.batch < 1 or self.steps < 0:
            raise TrainConfigError("batch must be >= 1 and steps >= 0")

    def to_dict(self):
        return asdict(self)


def train(model, dataset, corpus, cfg, T=None, metrics_path=None, checkpoint_path=None,
          config_digest=None, extra=None):
    """
    Adam with gradient-norm clipping over windows drawn from ``dataset``.

    Window histories are drawn uniformly in [1, T] and left-padded, so every
    truncated context the history-length search evaluates is trained.

    :param model: PolicyModel, trained in place.
    :param dataset: Non-empty Dataset.
    :param corpus: TextCorpus for the auxiliary language task, or None.
    :param cfg: TrainConfig.
    :param T: Window length. Defaults to min(T_max, longest trajectory).
    :param metrics_path: JSON-lines file receiving one record per step.
    :param checkpoint_path: Written every ``checkpoint_every`` steps and at the end.
    :param config_digest: Embedded in every metrics record.
    :param extra: Checkpoint header metadata.
    :return: (model, list of per-step metric dicts)
    """
    if len(dataset) == 0:
        raise TrajectoryError("cannot train on an empty dataset")
    if T is None:
        T = min(model.cfg.T_max, dataset.max_length)
    T = min(T, model.cfg.T_max)

    torch.manual_seed(cfg.seed)
    sampler = BatchSampler(dataset, cfg.seed)
    model.detach_max = cfg.max_stop_grad
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    use_lang = cfg.aux_language and corpus is not None and model.has_lm
    if cfg.aux_language and not use_lang:
        log.warning("Auxiliary language task requested but no corpus or LM projections, disabled")
    lm_length = min(cfg.lm_length, model.cfg.lm_context + 1) if use_lang else 0

    metrics = []
    mfile = open(metrics_path, 'w', encoding='utf-8') if metrics_path else None
    try:
        for step in tqdm(range(1, cfg.steps + 1), desc="train", disable=not progress_enabled(log)):
            batch = collate(sampler.sample(cfg.batch, T, vary_length=True), dtype=model.dtype)
            lang = make_language_batch(corpus, cfg.lm_batch, lm_length, seed=[cfg.seed, step]) \
                if use_lang else None

            loss, breakdown = total_loss(model, batch, lang, cfg)
            check_finite(breakdown, step)

            optimizer.zero_grad()
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            optimizer.step()

            record = {"step": step}
            record.update(breakdown)
            record["grad_norm"] = grad_norm
            record["config_digest"] = config_digest
            metrics.append(record)
            if mfile is not None:
                mfile.write(json.dumps(record, sort_keys=True) + "\n")

            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d: L_total %.4f L_Ne %.4f L_Ng %.4f L_lang %.4f L_max %.4f L_bin %.4f"
                         % (step, breakdown["L_total"], breakdown["L_Ne"], breakdown["L_Ng"],
                            breakdown["L_lang"], breakdown["L_max"], breakdown["L_bin"]))
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_model(model, checkpoint_path, extra)
    finally:
        if mfile is not None:
            mfile.close()

    model.eval()
    if checkpoint_path:
        save_model(model, checkpoint_path, extra)
    return model, metrics


def batch_action_accuracy(model, dataset, T=None, batch=256, seed=0):
    """
    Fraction of logged actions reproduced by the argmax of the action head
    when conditioned on the logged returns-to-go.
    """
    if T is None:
        T = min(model.cfg.T_max, dataset.max_length)
    windows = BatchSampler(dataset, seed, worker_id=1).sample(batch, T, vary_length=True)
    b = collate(windows, dtype=model.dtype)
    model.eval()
    with torch.no_grad():
        pred = model(b)["action_logits"].argmax(dim=-1)
    hit = (pred == b.actions) & b.mask
    return float(hit.sum()) / float(b.mask.sum())
