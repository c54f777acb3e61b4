"""Known generating grammars and sampled corpora for recovery experiments."""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_softmax, logsumexp

from .corpus import GoldSentence, spans_to_brackets
from .grammar import DEFAULT_BINDING, Leaf, NblParams, extract_dependencies, heads_array, sample_tree

NT_LABELS = ("S", "NP", "VP", "PP", "SBAR", "ADJP", "ADVP")
PT_LABELS = ("DT", "NN", "VB", "IN", "JJ", "RB", "PRP", "CD", "MD", "CC")


def _bias_to_rate(logits, n_nt, rate, axes):
    """Add a constant to the nonterminal logits so their mean probability is ``rate``."""

    def mass(bias):
        x = logits.copy()
        x[:, :n_nt] += bias
        lp = x - logsumexp(x, axis=axes, keepdims=True)
        return float(np.exp(lp[:, :n_nt]).sum(axis=tuple(range(1, lp.ndim))).mean()) - rate

    bias = brentq(mass, -60.0, 60.0)
    out = logits.copy()
    out[:, :n_nt] += bias
    return out - logsumexp(out, axis=axes, keepdims=True)


def synthetic_grammar(n_nt=3, n_pt=6, vocab_size=50, d_h=8, binding=DEFAULT_BINDING, seed=0,
                      sharpness=3.0, head_rate=0.45, nonhead_rate=0.4):
    """Random factored grammar with peaked distributions and controlled depth.

    ``head_rate``/``nonhead_rate`` are the mean probabilities that the head
    or non-head child is a nonterminal; their sum below 1 keeps trees finite.
    Only ``D_with_C`` and ``D_alone`` bindings are generated.
    """
    if binding not in ("D_with_C", "D_alone"):
        raise ValueError("synthetic grammars support the D_with_C and D_alone bindings")
    rng = np.random.default_rng(seed)
    m = n_nt + n_pt
    c = sharpness
    norm = lambda shape, axis: log_softmax(rng.standard_normal(shape) * c, axis=axis)
    head = _bias_to_rate(rng.standard_normal((d_h, m)) * c, n_nt, head_rate, 1)
    if binding == "D_with_C":
        nonhead = _bias_to_rate(rng.standard_normal((d_h, m, 2)) * c, n_nt, nonhead_rate, (1, 2))
        log_dir = None
    else:
        nonhead = _bias_to_rate(rng.standard_normal((d_h, m)) * c, n_nt, nonhead_rate, 1)
        log_dir = norm((d_h, 2), 1)
    return NblParams(
        log_root=norm((n_nt,), 0),
        log_emit=norm((n_nt, vocab_size), 1),
        log_latent=norm((n_nt, vocab_size, d_h), 2),
        log_head=head,
        log_nonhead=nonhead,
        log_word=norm((d_h, vocab_size), 1),
        log_dir=log_dir,
        binding=binding,
    )


def sample_corpus(params, n, seed=0, min_len=2, max_len=20, max_tries=None):
    """``n`` (word ids, tree) pairs with ``min_len <= len <= max_len`` (rejection sampling)."""
    rng = np.random.default_rng(seed)
    out, tries = [], 0
    max_tries = max_tries or 1000 * n
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"rejection sampling produced only {len(out)} of {n} sentences")
        got = sample_tree(params, max_len, rng)
        if got is None or len(got[0]) < min_len:
            continue
        out.append(got)
    return out


def word_names(vocab_size):
    return [f"w{k}" for k in range(vocab_size)]


def symbol_names(n_nt, n_sym):
    names = []
    for s in range(n_sym):
        if s < n_nt:
            names.append(NT_LABELS[s] if s < len(NT_LABELS) else f"NT{s}")
        else:
            k = s - n_nt
            names.append(PT_LABELS[k] if k < len(PT_LABELS) else f"PT{k}")
    return names


def tree_to_ptb(tree, tokens, names):
    """Bracketed string with symbol labels; preterminal leaves carry their tag."""
    if isinstance(tree, Leaf):
        return f"({names[tree.symbol]} {tokens[tree.position]})"
    return f"({names[tree.symbol]} {tree_to_ptb(tree.left, tokens, names)} {tree_to_ptb(tree.right, tokens, names)})"


def to_gold(words, tree, n_nt, n_sym):
    """GoldSentence with labeled spans, tags and heads of a sampled tree."""
    names = symbol_names(n_nt, n_sym)
    tokens = [f"w{w}" for w in words]
    tags, spans = [None] * len(words), []

    def walk(node):
        if isinstance(node, Leaf):
            tags[node.position] = names[node.symbol]
            return node.position, node.position + 1
        i, _ = walk(node.left)
        _, j = walk(node.right)
        spans.append((i, j, names[node.symbol]))
        return i, j

    walk(tree)
    arcs, root = extract_dependencies(tree)
    return GoldSentence(tokens, tags, spans, [int(h) for h in heads_array(arcs, root, len(words))])


def add_punctuation(gold, rng, rate=0.5):
    """Insert a final '.' (and sometimes an inner ',') attached to the root word."""
    tokens, tags, heads, spans = list(gold.tokens), list(gold.tags), list(gold.heads), list(gold.spans)
    root = heads.index(0) + 1
    if rng.random() < rate and len(tokens) > 2:
        k = int(rng.integers(1, len(tokens)))
        # shift everything at or after k right by one
        heads = [h + 1 if h > k else h for h in heads]
        root = root + 1 if root > k else root
        tokens.insert(k, ",")
        tags.insert(k, ",")
        heads.insert(k, root)
        spans = [(i + (i >= k), j + (j > k), lab) for i, j, lab in spans]
    tokens.append(".")
    tags.append(".")
    heads.append(root)
    n = len(tokens)
    spans = [(i, n if j == n - 1 and i == 0 else j, lab) for i, j, lab in spans]
    return GoldSentence(tokens, tags, spans, heads)


def gold_to_ptb(gold):
    """Re-serialize a GoldSentence (spans must be nested) as one bracketed line."""
    leaves = [f"({t} {w})" for t, w in zip(gold.tags, gold.tokens)]
    return spans_to_brackets(leaves, gold.spans)


def gold_to_conll(gold):
    rows = []
    for k, (w, t, h) in enumerate(zip(gold.tokens, gold.tags, gold.heads), 1):
        rows.append(f"{k}\t{w}\t_\t{t}\t{t}\t_\t{h}\t_\t_\t_")
    return "\n".join(rows) + "\n"


def write_treebank(golds, tree_path, conll_path):
    with open(tree_path, "w", encoding="utf-8") as fh:
        for g in golds:
            fh.write(gold_to_ptb(g) + "\n")
    with open(conll_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(gold_to_conll(g) for g in golds))


__all__ = [
    "add_punctuation", "gold_to_conll", "gold_to_ptb", "sample_corpus", "symbol_names",
    "synthetic_grammar", "to_gold", "tree_to_ptb", "word_names", "write_treebank",
]
