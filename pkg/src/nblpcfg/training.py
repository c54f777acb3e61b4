"""Adam training on sentence marginal likelihood with per-epoch early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import make_batches, pad_batch
from .neural import compute_global_distributions, sentence_log_likelihood

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "mean_nll", "dev_ppl", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.75
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    max_len: int = 40
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(weights, grads, state, config):
    """Bias-corrected Adam update in place; ``weights`` and ``grads`` are name-keyed."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if w.shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, weight has {w.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(w), np.zeros_like(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        w -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return weights, state


@dataclass
class EpochStats:
    mean_nll: float
    grad_norm: float
    seconds: float
    sentences: int
    skipped: int = 0
    aborted_batches: int = 0


def batch_loss(model, encoded):
    """Mean NLL node over the sentences of a batch that have finite likelihood.

    Returns ``(loss node or None, per-sentence log likelihoods, skipped count)``.
    """
    words, lengths = pad_batch(encoded)
    res = sentence_log_likelihood(model, words, lengths)
    ll = res.node.value
    ok = np.isfinite(ll)
    if not ok.all():
        skipped = int((~ok).sum())
        log.warning("skipping %d sentences with zero likelihood", skipped)
        if not ok.any():
            return None, ll, skipped
        keep = np.flatnonzero(ok)
        words, lengths = words[keep], lengths[keep]
        res = sentence_log_likelihood(model, words[:, : lengths.max()], lengths)
        return ad.scale(ad.sum_all(res.node), -1.0 / len(keep)), ll, skipped
    return ad.scale(ad.sum_all(res.node), -1.0 / len(ll)), ll, 0


def train_epoch(model, encoded, batches, state, config):
    """One pass of Adam updates over ``batches`` (lists of indices into ``encoded``)."""
    t0 = time.perf_counter()
    weights = {k: n.value for k, n in model.weights.items()}
    total_ll, count, skipped, aborted, sq = 0.0, 0, 0, 0, 0.0
    for batch in batches:
        loss, ll, sk = batch_loss(model, [encoded[k] for k in batch])
        skipped += sk
        if loss is None:
            continue
        grads = ad.backward(loss)
        by_name = {name: grads[node] for name, node in model.weights.items() if node in grads}
        try:
            adam_step(weights, by_name, state, config)
        except NonFiniteGradient as exc:
            log.warning("batch aborted: %s", exc)
            aborted += 1
            continue
        finite = ll[np.isfinite(ll)]
        total_ll += float(finite.sum())
        count += len(finite)
        sq += sum(float(np.sum(g * g)) for g in by_name.values())
    mean_nll = -total_ll / count if count else 0.0
    return EpochStats(mean_nll, math.sqrt(sq), time.perf_counter() - t0, count, skipped, aborted)


def corpus_log_likelihood(model, encoded, batch_size=32):
    """Per-sentence log likelihoods (no gradient bookkeeping kept)."""
    dists = compute_global_distributions(model)
    order = sorted(range(len(encoded)), key=lambda k: len(encoded[k]))
    out = np.empty(len(encoded))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        words, lengths = pad_batch([encoded[k] for k in idx])
        out[idx] = sentence_log_likelihood(model, words, lengths, dists=dists).node.value
    return out


def perplexity_from_ll(ll, lengths):
    """``exp(-sum log p / sum tokens)``; sentences with zero likelihood are excluded."""
    ll = np.asarray(ll, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    ok = np.isfinite(ll)
    if (~ok).any():
        log.warning("%d sentences with zero likelihood excluded from perplexity", int((~ok).sum()))
    if not ok.any():
        return float("inf")
    return float(np.exp(-ll[ok].sum() / lengths[ok].sum()))


def dev_perplexity(model, encoded):
    encoded = [s for s in encoded if len(s) >= 2]
    return perplexity_from_ll(corpus_log_likelihood(model, encoded), [len(s) for s in encoded])


@dataclass
class FitResult:
    best_weights: dict
    best_epoch: int
    best_ppl: float
    history: list


def fit(model, train, dev, config, on_epoch=None):
    """Train for ``config.epochs`` epochs and restore the weights of the lowest dev perplexity.

    Without a dev set the last epoch is kept. ``train``/``dev`` are lists of
    encoded sentences.
    """
    state = OptState()
    history = []
    best = (float("nan"), 0, model.numpy_weights())
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train, config.batch_size, config.max_len, config.seed, epoch)
        stats = train_epoch(model, train, batches, state, config)
        ppl = dev_perplexity(model, dev) if dev and epoch % config.eval_every == 0 else float("nan")
        row = {"epoch": epoch, "mean_nll": stats.mean_nll, "dev_ppl": ppl, "seconds": stats.seconds}
        history.append(row)
        log.info("epoch %d nll %.4f dev ppl %.3f (%.1fs)", epoch, stats.mean_nll, ppl, stats.seconds)
        if on_epoch is not None:
            on_epoch(row, model)
        if not dev or (not math.isnan(ppl) and (math.isnan(best[0]) or ppl < best[0])):
            best = (ppl, epoch, model.numpy_weights())
    for name, w in best[2].items():
        model.weights[name].value[...] = w
    return FitResult(best[2], best[1], best[0], history)


def select_best(ppls):
    """Index of the lowest perplexity (earliest on ties)."""
    return int(np.nanargmin(np.asarray(ppls, dtype=np.float64)))


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


__all__ = [
    "EpochStats", "FitResult", "HISTORY_COLUMNS", "NonFiniteGradient", "OptState", "TrainConfig",
    "adam_step", "batch_loss", "corpus_log_likelihood", "dev_perplexity", "fit", "perplexity_from_ll",
    "select_best", "train_epoch", "write_history",
]
