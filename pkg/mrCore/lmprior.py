############################################################
# misret: offline return-conditioned recommendation        #
# Character-level text pretraining of the policy backbone. #
############################################################

import math
import os
from dataclasses import replace

import numpy as np
import torch
from tqdm import tqdm

from .losses import NumericalError, language_loss
from .model import init_model, save_model
from .utils import setup_log, progress_enabled

log = setup_log("mrCore.lmprior")


class CorpusError(Exception):
    pass


class PretrainError(Exception):
    pass


class TextCorpus:
    """
    Token ids of a text under a character vocabulary.

    Ids 0..V-1 are the sorted distinct characters, id V is the reserved
    unknown-character id, so models need V + 1 output rows.
    """

    def __init__(self, ids, itos, path=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.itos = list(itos)
        self.stoi = {ch: i for i, ch in enumerate(self.itos)}
        self.path = path

    def __len__(self):
        return self.ids.size

    @property
    def vocab_size(self):
        return len(self.itos)

    @property
    def unk_id(self):
        return len(self.itos)

    @property
    def n_symbols(self):
        return len(self.itos) + 1

    def encode(self, text):
        return np.array([self.stoi.get(ch, self.unk_id) for ch in text], dtype=np.int64)

    def decode(self, ids, unk="?"):
        return "".join(self.itos[i] if 0 <= i < len(self.itos) else unk for i in np.asarray(ids).tolist())

    def split(self, held_out):
        """
        :return: (train, held) corpora over the same vocabulary. The held-out slice is the tail.
        """
        n_held = int(round(len(self) * held_out))
        if n_held < 2 or len(self) - n_held < 2:
            raise CorpusError("corpus of %d tokens is too short for a %.0f%% held-out split"
                              % (len(self), 100 * held_out))
        return (TextCorpus(self.ids[:-n_held], self.itos, self.path),
                TextCorpus(self.ids[-n_held:], self.itos, self.path))


def tokenize_corpus(text, level="char", vocab=None):
    """
    :param text: Non-empty text.
    :param level: Only "char" is supported.
    :param vocab: Existing character list to reuse. Built from ``text`` when None.
    :rtype: TextCorpus
    """
    if level != "char":
        raise CorpusError("unsupported tokenization level %r" % level)
    if not text:
        raise CorpusError("cannot tokenize empty text")
    itos = sorted(set(text)) if vocab is None else list(vocab)
    corpus = TextCorpus([], itos)
    corpus.ids = corpus.encode(text)
    return corpus


def load_corpus(path, vocab=None):
    """
    :param vocab: Character list of an existing model, None builds it from the file.
    """
    if not os.path.isfile(path):
        raise CorpusError("corpus file not found: %s" % path)
    with open(path, 'r', encoding='utf-8') as f:
        corpus = tokenize_corpus(f.read(), vocab=vocab)
    corpus.path = path
    log.debug("Loaded corpus %s: %d chars, vocab %d" % (path, len(corpus), corpus.vocab_size))
    return corpus


def make_language_batch(corpus, batch, length, seed):
    """
    Uniformly placed contiguous token windows.

    :return: int64 array [batch, length]
    """
    if length > len(corpus):
        raise CorpusError("window length %d exceeds corpus of %d tokens" % (length, len(corpus)))
    if batch < 1 or length < 1:
        raise CorpusError("batch and length must be >= 1")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(corpus) - length + 1, size=batch)
    return np.stack([corpus.ids[s:s + length] for s in starts])


def held_out_nll(model, corpus, length, max_windows=256):
    """
    Mean next-token NLL over consecutive non-overlapping windows of ``corpus``.
    """
    length = min(length, len(corpus))
    n = min(len(corpus) // length, max_windows)
    windows = corpus.ids[:n * length].reshape(n, length)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        nll = float(language_loss(model, windows))
    model.train(was_training)
    return nll


def pretrain_lm(cfg, corpus, steps, lr, seed, batch=32, length=48, held_out=0.1, path=None):
    """
    Trains the backbone and LM projections with next-token prediction.

    :param cfg: ModelConfig of the backbone. LM sizes are set from the corpus.
    :param corpus: TextCorpus.
    :param steps: Number of optimizer steps, >= 1.
    :param path: Checkpoint path to write, if any.
    :return: (model, report) with held-out NLL before and after training.
    """
    if steps < 1:
        raise PretrainError("pretraining needs steps >= 1, got %d" % steps)
    train_part, held_part = corpus.split(held_out)
    length = min(length, len(train_part))
    pcfg = replace(cfg, lm_vocab=corpus.n_symbols, lm_context=max(cfg.lm_context, length),
                   lora_rank=0, freeze_mode="full")

    model = init_model(pcfg, None, seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)

    nll_before = held_out_nll(model, held_part, length)
    log.info("Held-out NLL before pretraining: %.4f" % nll_before)

    curve = []
    for step in tqdm(range(steps), desc="pretrain-lm", disable=not progress_enabled(log)):
        tokens = make_language_batch(train_part, batch, length, seed=[seed, step])
        loss = language_loss(model, tokens)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError("non-finite loss at step %d in term L_lang" % step)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        curve.append(value)

    nll_after = held_out_nll(model, held_part, length)
    log.info("Held-out NLL after %d steps: %.4f" % (steps, nll_after))

    model.eval()
    model.extra = {
        "variant": "lm-prior",
        "vocab": "".join(corpus.itos),
        "corpus_path": corpus.path
    }
    report = {
        "nll_before": nll_before,
        "nll_after": nll_after,
        "steps": steps,
        "curve": curve
    }
    if path is not None:
        save_model(model, path, {"pretrain": {k: report[k] for k in ("nll_before", "nll_after", "steps")}})
    return model, report
