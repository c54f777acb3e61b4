"""Corpus loading, neural decoding and evaluation glue shared by the CLI."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusError, GoldSentence, parse_sexpr, preprocess, read_bracketed_treebank, read_conll,
    read_conll_sentences, read_plain_text, tree_to_sentence,
)
from .decode import (
    ArcMarginals, ParseOutput, SpanMarginals, bracketing_spans, bracketing_to_string, compute_marginals,
    mbr_constituency, mbr_dependency, viterbi_cyk,
)
from .evaluation import EvalReport, corpus_attachment, corpus_f1, label_recall
from .neural import compute_global_distributions, compute_sentence_conditionals, grammar_params
from .training import dev_perplexity

log = logging.getLogger(__name__)

CONLL_SUFFIXES = (".conll", ".conllu", ".conllx", ".dep")
TEXT_SUFFIXES = (".txt", ".tok", ".raw")
DECODERS = ("mbr", "viterbi")


def load_sentences(path, conll=None):
    """Read a corpus, choosing the reader by suffix.

    CoNLL suffixes give tokens, tags and heads; text suffixes give bare
    tokens; anything else is read as one bracketed tree per line. ``conll``
    attaches heads to a bracketed corpus.
    """
    suffix = Path(path).suffix.lower()
    if suffix in CONLL_SUFFIXES:
        sents = read_conll_sentences(path)
    elif suffix in TEXT_SUFFIXES:
        sents = read_plain_text(path)
    else:
        sents = read_bracketed_treebank(path)
    if conll is not None:
        read_conll(conll, treebank=sents)
    return sents


def encode(sentences, vocab):
    return [vocab.encode(s.tokens if isinstance(s, GoldSentence) else s) for s in sentences]


def _length_batches(encoded, batch_size):
    order = sorted(range(len(encoded)), key=lambda k: len(encoded[k]))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def decode_model(model, encoded, method="mbr", batch_size=16):
    """One :class:`ParseOutput` per encoded sentence (length >= 2)."""
    if method not in DECODERS:
        raise ValueError(f"unknown decoder {method!r}; expected one of {DECODERS}")
    for k, s in enumerate(encoded):
        if len(s) < 2:
            raise CorpusError(f"sentence {k} has fewer than 2 words")
    params = grammar_params(model, compute_global_distributions(model)).numpy()
    out = [None] * len(encoded)
    if method == "viterbi":
        for k, s in enumerate(encoded):
            latent = compute_sentence_conditionals(model, [s]).value
            out[k] = viterbi_cyk(params, s, latent=latent)
        return out
    for idx in _length_batches(encoded, batch_size):
        lengths = np.asarray([len(encoded[k]) for k in idx])
        words = np.zeros((len(idx), lengths.max()), dtype=np.int64)
        for r, k in enumerate(idx):
            words[r, : lengths[r]] = encoded[k]
        latent = compute_sentence_conditionals(model, words).value
        ll, spans, arcs, roots = compute_marginals(params, words, latent=latent, lengths=lengths)
        for r, k in enumerate(idx):
            n = lengths[r]
            out[k] = ParseOutput(
                tree=mbr_constituency(SpanMarginals(spans[r, : n + 1, : n + 1])),
                heads=mbr_dependency(ArcMarginals(arcs[r, :n, :n], roots[r, :n])),
                log_likelihood=float(ll[r]),
            )
    return out


# ---------------------------------------------------------------------------
# parse output


def format_parse(tokens, parse):
    """Bracketed line followed by a CoNLL block (index, form, head)."""
    lines = [bracketing_to_string(parse.tree, list(tokens))]
    for k, (tok, head) in enumerate(zip(tokens, parse.heads), 1):
        lines.append(f"{k}\t{tok}\t_\t_\t_\t_\t{int(head)}\t_\t_\t_")
    return "\n".join(lines) + "\n"


def read_predictions(path):
    """``[(spans, heads or None, length)]`` from parse output or one tree per line."""
    out, cur = [], None
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(list(fh) + [""], 1):
            line = raw.strip()
            if line.startswith("("):
                if cur is not None:
                    out.append(cur)
                try:
                    sent = tree_to_sentence(parse_sexpr(line))
                except CorpusError as exc:
                    raise CorpusError(f"{path}:{n}: {exc}") from None
                cur = [sent.unlabeled_spans(), [], len(sent.tokens)]
            elif line and not line.startswith("#"):
                if cur is None:
                    raise CorpusError(f"{path}:{n}: dependency line before any tree")
                cols = line.split("\t") if "\t" in line else line.split()
                try:
                    cur[1].append(int(cols[6] if len(cols) > 6 else cols[2]))
                except (IndexError, ValueError):
                    raise CorpusError(f"{path}:{n}: malformed dependency line") from None
    if cur is not None:
        out.append(cur)
    return [(spans, heads or None, length) for spans, heads, length in out]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(golds, pred_spans, pred_heads=None, ppl=float("nan")):
    """EvalReport over aligned gold sentences and predictions.

    ``pred_heads`` may be ``None`` (or gold heads may be missing), in which
    case the attachment scores are NaN.
    """
    if len(golds) != len(pred_spans):
        raise CorpusError(f"{len(pred_spans)} predictions for {len(golds)} gold sentences")
    lengths = [len(g) for g in golds]
    gold_spans = [g.unlabeled_spans() for g in golds]
    f1 = corpus_f1(pred_spans, gold_spans, lengths)
    udas = uuas = float("nan")
    if pred_heads is not None and all(g.heads is not None for g in golds):
        for k, (h, g) in enumerate(zip(pred_heads, golds)):
            if h is None or len(h) != len(g):
                raise CorpusError(f"sentence {k}: predicted heads do not align with gold")
        udas, uuas = corpus_attachment(pred_heads, [g.heads for g in golds])
    recall = label_recall(pred_spans, [g.spans for g in golds], lengths)
    return EvalReport(f1_mean=f1, f1_std=0.0, udas=udas, uuas=uuas, ppl=ppl,
                      label_recall=recall, n_sentences=len(golds))


def evaluate_model(model, vocab, golds, method="mbr"):
    """Decode ``golds`` with ``model`` and score parses plus perplexity."""
    encoded = encode(golds, vocab)
    parses = decode_model(model, encoded, method)
    spans = [set(bracketing_spans(p.tree)) for p in parses]
    heads = [[int(h) for h in p.heads] for p in parses]
    return evaluate(golds, spans, heads, dev_perplexity(model, encoded)), parses


def prepare(sentences, strip=True):
    return preprocess(sentences, strip=strip)


__all__ = [
    "DECODERS", "decode_model", "encode", "evaluate", "evaluate_model", "format_parse", "load_sentences",
    "prepare", "read_predictions",
]
