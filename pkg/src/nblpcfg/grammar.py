"""Lexicalized PCFG representations.

Symbol indexing: child symbols are ``0..n_sym-1`` where the first ``n_nt``
are nonterminals and the rest preterminals; parents range over
nonterminals only. Directions: ``0`` means the head child is the left
child, ``1`` the right child.

Binary-rule tables are indexed ``(A, w_p, B, C, D, w_q)`` with ``B`` the
head-child symbol, ``C`` the non-head-child symbol, ``D`` the direction and
``w_q`` the non-head child's head word.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad

BINDINGS = ("D_with_C", "D_alone", "D_with_Wq", "D_with_B")
DEFAULT_BINDING = "D_with_C"
LEFT, RIGHT = 0, 1

MAX_DENSE_WORDS = 6
MAX_DENSE_SYMBOLS = 8


class GrammarError(ValueError):
    pass


class TreeError(GrammarError):
    pass


def _val(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class SymbolInventory:
    n_nt: int
    n_pt: int
    vocab: tuple

    def __post_init__(self):
        if self.n_nt < 1 or self.n_pt < 1:
            raise GrammarError("need at least one nonterminal and one preterminal")
        if len(self.vocab) < 2:
            raise GrammarError("vocabulary needs at least two words")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.vocab)})

    @property
    def n_sym(self):
        return self.n_nt + self.n_pt

    def word_index(self, word):
        return self._index[word]

    def is_preterminal(self, sym):
        return self.n_nt <= sym < self.n_sym


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class NblParams:
    """Latent-variable factored L-PCFG, all entries log probabilities.

    ``log_latent`` is ``(n_nt, V, d_H)`` or ``None`` when the conditional
    ``p(H | A, w)`` is produced per sentence by a neural model. The bound
    factor carries a trailing direction axis of size 2 and is normalized
    jointly with it. Fields may be numpy arrays or autodiff nodes.
    """

    log_root: object
    log_emit: object
    log_latent: object
    log_head: object
    log_nonhead: object
    log_word: object
    log_dir: object = None
    binding: str = DEFAULT_BINDING

    def __post_init__(self):
        if self.binding not in BINDINGS:
            raise GrammarError(f"unknown binding {self.binding!r}")

    @property
    def n_nt(self):
        return _val(self.log_root).shape[0]

    @property
    def n_sym(self):
        return _val(self.log_head).shape[1]

    @property
    def d_h(self):
        return _val(self.log_head).shape[0]

    @property
    def vocab_size(self):
        return _val(self.log_emit).shape[1]

    def direction_factors(self, d):
        """``(head[H,M], nonhead[H,M], word[H,V])`` for direction ``d``.

        The direction-only factor of ``D_alone`` is folded into the
        non-head term. Values are nodes when the fields are nodes.
        """
        b = self.binding
        head, nonhead, word = self.log_head, self.log_nonhead, self.log_word
        if b == "D_with_B":
            head = ad.getitem(head, (slice(None), slice(None), d))
        if b == "D_with_C":
            nonhead = ad.getitem(nonhead, (slice(None), slice(None), d))
        if b == "D_with_Wq":
            word = ad.getitem(word, (slice(None), slice(None), d))
        if b == "D_alone":
            dcol = ad.getitem(self.log_dir, (slice(None), slice(d, d + 1)))
            nonhead = ad.log_einsum("HC,Hx->HC", nonhead, dcol, exact=True)
        return ad.as_node(head), ad.as_node(nonhead), ad.as_node(word)

    def head_shared(self):
        """True when the head-child factor does not depend on direction."""
        return self.binding != "D_with_B"

    def numpy(self):
        return NblParams(
            *[None if f is None else _val(f) for f in (
                self.log_root, self.log_emit, self.log_latent, self.log_head,
                self.log_nonhead, self.log_word, self.log_dir)],
            binding=self.binding,
        )


@dataclass
class ZhuParams:
    """Factorization with ``p(B, D, C | A, w_p) p(w_q | C)``.

    ``log_rule`` is ``(n_nt, V, n_sym, 2, n_sym)`` indexed
    ``(A, w_p, head B, D, non-head C)``; ``log_child_word`` is ``(n_sym, V)``.
    """

    log_root: object
    log_emit: object
    log_rule: object
    log_child_word: object

    @property
    def n_nt(self):
        return _val(self.log_root).shape[0]

    @property
    def n_sym(self):
        return _val(self.log_child_word).shape[0]

    @property
    def vocab_size(self):
        return _val(self.log_emit).shape[1]


@dataclass
class DenseLpcfg:
    """Fully expanded order-6 binary table over a (possibly restricted) word set.

    ``words`` lists the vocabulary ids covered, in local index order;
    ``complete`` is true when they are the whole vocabulary.
    """

    log_binary: np.ndarray
    log_start: np.ndarray
    words: tuple
    complete: bool

    @property
    def n_nt(self):
        return self.log_binary.shape[0]

    @property
    def n_sym(self):
        return self.log_binary.shape[2]

    def local(self, sentence):
        index = {w: i for i, w in enumerate(self.words)}
        try:
            return [index[int(w)] for w in sentence]
        except KeyError as exc:
            raise GrammarError(f"word {exc.args[0]} not covered by dense table") from None


# ---------------------------------------------------------------------------
# constructors


def _random_logdist(rng, shape, axes, concentration):
    logits = rng.standard_normal(shape) * concentration
    return logits - logsumexp(logits, axis=axes, keepdims=True)


def random_nbl_params(n_nt, n_pt, vocab_size, d_h, binding=DEFAULT_BINDING, rng=None, concentration=1.0):
    rng = np.random.default_rng(rng)
    m = n_nt + n_pt
    c = concentration
    dshape = lambda base, bound: base + (2,) if bound else base
    bound_axes = lambda bound: (1, 2) if bound else 1
    return NblParams(
        log_root=_random_logdist(rng, (n_nt,), 0, c),
        log_emit=_random_logdist(rng, (n_nt, vocab_size), 1, c),
        log_latent=_random_logdist(rng, (n_nt, vocab_size, d_h), 2, c),
        log_head=_random_logdist(rng, dshape((d_h, m), binding == "D_with_B"), bound_axes(binding == "D_with_B"), c),
        log_nonhead=_random_logdist(rng, dshape((d_h, m), binding == "D_with_C"), bound_axes(binding == "D_with_C"), c),
        log_word=_random_logdist(rng, dshape((d_h, vocab_size), binding == "D_with_Wq"), bound_axes(binding == "D_with_Wq"), c),
        log_dir=_random_logdist(rng, (d_h, 2), 1, c) if binding == "D_alone" else None,
        binding=binding,
    )


def uniform_nbl_params(n_nt, n_pt, vocab_size, d_h, binding=DEFAULT_BINDING):
    return random_nbl_params(n_nt, n_pt, vocab_size, d_h, binding, rng=0, concentration=0.0)


def random_zhu_params(n_nt, n_pt, vocab_size, rng=None, concentration=1.0):
    rng = np.random.default_rng(rng)
    m = n_nt + n_pt
    c = concentration
    return ZhuParams(
        log_root=_random_logdist(rng, (n_nt,), 0, c),
        log_emit=_random_logdist(rng, (n_nt, vocab_size), 1, c),
        log_rule=_random_logdist(rng, (n_nt, vocab_size, m, 2, m), (2, 3, 4), c),
        log_child_word=_random_logdist(rng, (m, vocab_size), 1, c),
    )


def uniform_zhu_params(n_nt, n_pt, vocab_size):
    return random_zhu_params(n_nt, n_pt, vocab_size, rng=0, concentration=0.0)


# ---------------------------------------------------------------------------
# validation


def _check_axes(report, name, arr, axes, tol):
    s = np.exp(logsumexp(arr, axis=axes))
    bad = np.argwhere(np.abs(s - 1.0) > tol)
    for idx in bad:
        report.append(f"{name}[{', '.join(map(str, idx))}] sums to {s[tuple(idx)]:.12g}")


def validate_params(params, tol=1e-8):
    """List every distribution whose exponentiated sum is off 1 by more than ``tol``.

    For a dense table restricted to a word subset the binary and start
    tables only need to be sub-normalized.
    """
    report = []
    if isinstance(params, NblParams):
        p = params.numpy()
        _check_axes(report, "root", p.log_root, 0, tol)
        _check_axes(report, "emit", p.log_emit, 1, tol)
        if p.log_latent is not None:
            _check_axes(report, "latent", p.log_latent, 2, tol)
        for name, arr in (("head", p.log_head), ("nonhead", p.log_nonhead), ("word", p.log_word)):
            _check_axes(report, name, arr, tuple(range(1, arr.ndim)), tol)
        if p.log_dir is not None:
            _check_axes(report, "dir", p.log_dir, 1, tol)
    elif isinstance(params, ZhuParams):
        _check_axes(report, "root", _val(params.log_root), 0, tol)
        _check_axes(report, "emit", _val(params.log_emit), 1, tol)
        _check_axes(report, "rule", _val(params.log_rule), (2, 3, 4), tol)
        _check_axes(report, "child_word", _val(params.log_child_word), 1, tol)
    elif isinstance(params, DenseLpcfg):
        if params.complete:
            _check_axes(report, "binary", params.log_binary, (2, 3, 4, 5), tol)
            _check_axes(report, "start", params.log_start.reshape(-1), 0, tol)
        else:
            s = np.exp(logsumexp(params.log_binary, axis=(2, 3, 4, 5)))
            for idx in np.argwhere(s > 1.0 + tol):
                report.append(f"binary[{', '.join(map(str, idx))}] exceeds 1: {s[tuple(idx)]:.12g}")
    else:
        raise TypeError(f"cannot validate {type(params).__name__}")
    return report


# ---------------------------------------------------------------------------
# dense expansion


def _dense_words(words, vocab_size, n_sym):
    if words is None:
        words = tuple(range(vocab_size))
    else:
        words = tuple(dict.fromkeys(int(w) for w in words))
    if len(words) > MAX_DENSE_WORDS or n_sym > MAX_DENSE_SYMBOLS:
        raise GrammarError(
            f"dense table too large: {len(words)} words x {n_sym} symbols "
            f"(limit {MAX_DENSE_WORDS} x {MAX_DENSE_SYMBOLS})"
        )
    return words, len(words) == vocab_size


def nbl_rule_table(params, words):
    """``log p(B, C, D, w_q | A, w_p)`` for ``w_p, w_q`` in ``words``; shape (A, p, B, C, D, q)."""
    p = params.numpy()
    w = np.asarray(words, dtype=np.int64)
    if p.log_latent is None:
        raise GrammarError("params carry no global p(H|A,w); expand per sentence instead")
    lat = p.log_latent[:, w, :]
    out = []
    for d in (LEFT, RIGHT):
        head, nonhead, word = (_val(f) for f in params.numpy().direction_factors(d))
        t = (lat[:, :, None, None, None, :]
             + head.T[None, None, :, None, None, :]
             + nonhead.T[None, None, None, :, None, :]
             + word[:, w].T[None, None, None, None, :, :])
        out.append(logsumexp(t, axis=-1))
    return np.stack(out, axis=4)


def expand_nbl_to_dense(params, words=None):
    words, complete = _dense_words(words, params.vocab_size, params.n_sym)
    p = params.numpy()
    w = np.asarray(words, dtype=np.int64)
    binary = nbl_rule_table(p, w)
    start = p.log_root[:, None] + p.log_emit[:, w]
    return DenseLpcfg(binary, start, words, complete)


def expand_zhu_to_dense(params, words=None):
    words, complete = _dense_words(words, params.vocab_size, params.n_sym)
    w = np.asarray(words, dtype=np.int64)
    rule = _val(params.log_rule)[:, w]  # (A, p, B, D, C)
    cw = _val(params.log_child_word)[:, w]  # (C, q)
    binary = rule.transpose(0, 1, 2, 4, 3)[..., None] + cw[None, None, None, :, None, :]
    start = _val(params.log_root)[:, None] + _val(params.log_emit)[:, w]
    return DenseLpcfg(binary, start, words, complete)


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class Leaf:
    position: int
    symbol: int

    @property
    def head(self):
        return self.position

    @property
    def span(self):
        return (self.position, self.position + 1)


@dataclass(frozen=True)
class Binary:
    symbol: int
    head: int
    direction: int
    left: Union["Binary", Leaf]
    right: Union["Binary", Leaf]

    @property
    def span(self):
        return (self.left.span[0], self.right.span[1])

    @property
    def head_child(self):
        return self.left if self.direction == LEFT else self.right

    @property
    def nonhead_child(self):
        return self.right if self.direction == LEFT else self.left


LexTree = Union[Binary, Leaf]


def check_tree(tree, n_words=None):
    """Raise :class:`TreeError` unless spans are contiguous and heads are inherited."""

    def walk(node, start):
        if isinstance(node, Leaf):
            if node.position != start:
                raise TreeError(f"leaf at {node.position}, expected {start}")
            return start + 1
        if node.direction not in (LEFT, RIGHT):
            raise TreeError(f"bad direction {node.direction}")
        mid = walk(node.left, start)
        end = walk(node.right, mid)
        if node.head != node.head_child.head:
            raise TreeError(
                f"node over {node.span} has head {node.head} but its head child has {node.head_child.head}"
            )
        return end

    end = walk(tree, 0)
    if n_words is not None and end != n_words:
        raise TreeError(f"tree covers {end} words, sentence has {n_words}")
    return end


def binary_nodes(tree):
    out = []
    stack = [tree]
    while stack:
        n = stack.pop()
        if isinstance(n, Binary):
            out.append(n)
            stack.extend((n.right, n.left))
    return out


def leaves(tree):
    out = []
    stack = [tree]
    while stack:
        n = stack.pop()
        if isinstance(n, Leaf):
            out.append(n)
        else:
            stack.extend((n.right, n.left))
    return out


def tree_rules(tree):
    """``(root, rules, leaf symbols)``: root is ``(A, p)``, each rule ``(A, p, B, C, D, q)``."""
    check_tree(tree)
    rules = [
        (n.symbol, n.head, n.head_child.symbol, n.nonhead_child.symbol, n.direction, n.nonhead_child.head)
        for n in binary_nodes(tree)
    ]
    return (tree.symbol, tree.head), rules, [lf.symbol for lf in leaves(tree)]


def tree_spans(tree, include_trivial=True):
    spans = {n.span for n in binary_nodes(tree)}
    if include_trivial:
        spans.update(lf.span for lf in leaves(tree))
    return spans


def tree_to_brackets(tree, words=None, label=lambda n: "X"):
    def rec(n):
        if isinstance(n, Leaf):
            w = str(n.position) if words is None else str(words[n.position])
            return f"({label(n)} {w})"
        return f"({label(n)} {rec(n.left)} {rec(n.right)})"

    return rec(tree)


def _nbl_rule_logprob(p, sentence, A, pos, B, C, D, q):
    head, nonhead, word = (_val(f) for f in p.direction_factors(D))
    lat = _val(p.log_latent)[A, sentence[pos]]
    return float(logsumexp(lat + head[:, B] + nonhead[:, C] + word[:, sentence[q]]))


def tree_log_probability(params, tree, sentence):
    """Exact log probability of a lexicalized tree (start rule plus all binary rules)."""
    if not isinstance(tree, Binary):
        raise TreeError("a parse needs at least one binary node")
    check_tree(tree, len(sentence))
    (ra, rp), rules, leaf_syms = tree_rules(tree)
    n_nt = params.n_nt
    if not 0 <= ra < n_nt or any(not 0 <= r[0] < n_nt for r in rules):
        raise TreeError("parent symbols must be nonterminals")
    if any(s < n_nt for s in leaf_syms):
        return -math.inf
    sentence = [int(w) for w in sentence]
    if isinstance(params, DenseLpcfg):
        loc = params.local(sentence)
        total = float(params.log_start[ra, loc[rp]])
        for A, pos, B, C, D, q in rules:
            total += float(params.log_binary[A, loc[pos], B, C, D, loc[q]])
        return total
    total = float(_val(params.log_root)[ra] + _val(params.log_emit)[ra, sentence[rp]])
    if isinstance(params, NblParams):
        p = params.numpy()
        for r in rules:
            total += _nbl_rule_logprob(p, sentence, *r)
        return total
    if isinstance(params, ZhuParams):
        rule = _val(params.log_rule)
        cw = _val(params.log_child_word)
        for A, pos, B, C, D, q in rules:
            total += float(rule[A, sentence[pos], B, D, C] + cw[C, sentence[q]])
        return total
    raise TypeError(f"unsupported params {type(params).__name__}")


def extract_dependencies(tree):
    """Arcs ``{(head, dependent)}`` and the root position of a lexicalized tree."""
    check_tree(tree)
    arcs = set()
    for n in binary_nodes(tree):
        arcs.add((n.head, n.nonhead_child.head))
    return arcs, tree.head


def heads_array(arcs, root, n):
    """1-based head indices (0 = root) as in CoNLL files."""
    heads = [0] * n
    for h, d in arcs:
        heads[d] = h + 1
    heads[root] = 0
    return heads


# ---------------------------------------------------------------------------
# sampling


def _draw(rng, logp):
    p = np.exp(logp.reshape(-1) - logp.max())
    p /= p.sum()
    return int(rng.choice(p.size, p=p))


def sample_tree(params, max_len, rng):
    """Ancestral sample ``(word ids, tree)``, or ``None`` if it exceeds ``max_len`` words."""
    p = params.numpy()
    if p.log_latent is None:
        raise GrammarError("sampling needs global p(H|A,w)")
    rng = np.random.default_rng(rng)
    n_nt = p.n_nt
    budget = [max_len]

    def rule(A, w):
        H = _draw(rng, p.log_latent[A, w])
        b = p.binding
        if b == "D_with_C":
            B = _draw(rng, p.log_head[H])
            C, D = divmod(_draw(rng, p.log_nonhead[H]), 2)
            q = _draw(rng, p.log_word[H])
        elif b == "D_with_B":
            B, D = divmod(_draw(rng, p.log_head[H]), 2)
            C = _draw(rng, p.log_nonhead[H])
            q = _draw(rng, p.log_word[H])
        elif b == "D_with_Wq":
            B = _draw(rng, p.log_head[H])
            C = _draw(rng, p.log_nonhead[H])
            q, D = divmod(_draw(rng, p.log_word[H]), 2)
        else:
            B = _draw(rng, p.log_head[H])
            C = _draw(rng, p.log_nonhead[H])
            D = _draw(rng, p.log_dir[H])
            q = _draw(rng, p.log_word[H])
        return B, C, D, q

    def expand(sym, w):
        # nested tuples ("leaf", sym, w) / ("bin", sym, D, head_sub, nonhead_sub)
        if sym >= n_nt:
            budget[0] -= 1
            if budget[0] < 0:
                raise _TooLong
            return ("leaf", sym, w)
        B, C, D, q = rule(sym, w)
        hsub = expand(B, w)
        nsub = expand(C, q)
        return ("bin", sym, D, hsub, nsub)

    A = _draw(rng, p.log_root)
    wp = _draw(rng, p.log_emit[A])
    try:
        raw = expand(A, wp)
    except _TooLong:
        return None
    words = []

    def build(node):
        if node[0] == "leaf":
            words.append(node[2])
            return Leaf(len(words) - 1, node[1])
        _, sym, D, hsub, nsub = node
        first, second = (hsub, nsub) if D == LEFT else (nsub, hsub)
        left = build(first)
        right = build(second)
        head = (left if D == LEFT else right).head
        return Binary(sym, head, D, left, right)

    tree = build(raw)
    return words, tree


class _TooLong(Exception):
    pass
