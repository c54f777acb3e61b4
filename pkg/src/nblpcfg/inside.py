"""Inside algorithms for lexicalized PCFGs.

Every engine fills the same chart: for span width ``w`` a node of shape
``(batch, L - w + 1, n_sym, L)`` holding ``log s[i, i+w, X, p]`` with
``-inf`` wherever ``p`` lies outside the span or ``X`` cannot head it.
Widths are processed in increasing order; the children of all split points
of a width are gathered with :func:`autodiff.stack_windows`.

Sentences in a batch share the padded length ``L``; the sentence score is
read from the chart cell of its own length, so padding never leaks in.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad
from .grammar import LEFT, RIGHT, Binary, GrammarError, Leaf, tree_rules

NEG_INF = -np.inf
MAX_BRUTE_LENGTH = 5


@dataclass
class InsideResult:
    """Output of an inside pass.

    ``node`` is the differentiable ``(batch,)`` vector of sentence log
    likelihoods; ``log_likelihood`` is its value (a float for a single
    sentence).
    """

    log_likelihood: object
    node: ad.Node
    variant: str
    seconds: float
    chart: dict = None
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# batching helpers


def as_batch(sentences, lengths=None):
    """Return ``(word ids (b, L), lengths (b,), single)`` from one or many sentences."""
    if isinstance(sentences, np.ndarray) and sentences.ndim == 2:
        words = sentences.astype(np.int64)
        single = False
    elif len(sentences) and np.ndim(sentences[0]) == 0:
        words = np.asarray([sentences], dtype=np.int64)
        single = True
    else:
        single = False
        L = max(len(s) for s in sentences)
        words = np.zeros((len(sentences), L), dtype=np.int64)
        given = [len(s) for s in sentences]
        for b, s in enumerate(sentences):
            words[b, : len(s)] = s
        if lengths is None:
            lengths = given
    if lengths is None:
        lengths = [words.shape[1]] * words.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 2:
        raise GrammarError("sentences of length < 2 have no parse")
    return words, lengths, single


def _base(b, L, n_nt, n_sym):
    base = np.full((b, L, n_sym, L), NEG_INF)
    for i in range(L):
        base[:, i, n_nt:, i] = 0.0
    return ad.constant(base)


def left_windows(table, w, n):
    """Entries for the left children ``(i, i+u)``, ``u = 1..w-1``."""
    return ad.stack_windows([table[u] for u in range(1, w)], [0] * (w - 1), n)


def right_windows(table, w, n):
    """Entries for the right children ``(i+u, i+w)``, ``u = 1..w-1``."""
    return ad.stack_windows([table[w - u] for u in range(1, w)], list(range(1, w)), n)


def _rows(node, start, n):
    return ad.getitem(node, (slice(None), slice(start, start + n)))


def _per_split(w, n, term):
    """``term(u)`` for ``u = 1..w-1`` stacked on a split axis: ``(b, n, u, ...)``.

    Each term reads row slices of existing tables, so nothing of split-point
    size is kept for the backward pass.
    """
    return ad.stack_windows([term(u) for u in range(1, w)], [0] * (w - 1), n)


def _checkpointed(fn, w, tables, static=()):
    """Run ``fn(*tables_by_width, *static)`` for width ``w`` under :func:`ad.checkpoint`.

    Each of ``tables`` maps widths to nodes; ``fn`` receives the entries of
    widths ``1..w-1`` as fresh dicts, so the split-point windows built inside
    are recomputed in the backward pass instead of being held.
    """
    k = w - 1
    flat = [t[u] for t in tables for u in range(1, w)] + list(static)

    def run(*nodes):
        rebuilt = [dict(zip(range(1, w), nodes[j * k:(j + 1) * k])) for j in range(len(tables))]
        return fn(*rebuilt, *nodes[len(tables) * k:])

    return ad.checkpoint(run, *flat)


def _span_pot(pot, w, L):
    n = L - w + 1
    flat = ad.reshape(pot, (pot.shape[0], (L + 1) * (L + 1)))
    return ad.take(flat, [i * (L + 1) + i + w for i in range(n)], axis=1)


def _start_scores(log_root, log_emit, words, lengths, root_potentials=None):
    """``(b, A, p)``: log p(A | S) + log p(w_p | A), ``-inf`` beyond each length."""
    b, L = words.shape
    emit = ad.transpose(ad.take(log_emit, words, axis=1), (1, 0, 2))
    st = ad.log_einsum("bAp,A->bAp", emit, log_root, exact=True)
    mask = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, NEG_INF)
    st = ad.log_einsum("bAp,bp->bAp", st, mask, exact=True)
    if root_potentials is not None:
        st = ad.log_einsum("bAp,bp->bAp", st, root_potentials, exact=True)
    return st


def _root(chart, start, lengths, n_nt):
    parts, order = [], []
    for l in sorted(set(lengths.tolist())):
        idx = np.flatnonzero(lengths == l)
        top = ad.getitem(chart[l], (idx, 0, slice(0, n_nt), slice(None)))
        st = ad.getitem(start, (idx,))
        parts.append(ad.log_einsum("kAp,kAp->k", top, st))
        order.extend(idx.tolist())
    out = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inv = np.argsort(order)
    if not np.array_equal(inv, np.arange(len(inv))):
        out = ad.take(out, inv, axis=0)
    return out


def _run_chart(engine, b, L, n_nt, n_sym, span_potentials=None):
    pot = None if span_potentials is None else ad.as_node(span_potentials)
    chart = {}
    cell = _base(b, L, n_nt, n_sym)
    if pot is not None:
        cell = ad.log_einsum("bnMp,bn->bnMp", cell, _span_pot(pot, 1, L), exact=True)
    chart[1] = cell
    engine.completed(1, cell)
    for w in range(2, L + 1):
        n = L - w + 1
        new = engine.combine(w, n, chart)
        block = ad.constant(np.full((b, n, n_sym - n_nt, L), NEG_INF))
        cell = ad.concat([new, block], axis=2)
        if pot is not None:
            cell = ad.log_einsum("bnMp,bn->bnMp", cell, _span_pot(pot, w, L), exact=True)
        chart[w] = cell
        engine.completed(w, cell)
    return chart


def _lse_split(x):
    return ad.logsumexp(x, axis=2, allow_empty=True)


def _finish(variant, chart, start, lengths, n_nt, single, t0, keep_chart, stats=None):
    node = _root(chart, start, lengths, n_nt)
    ll = node.value
    return InsideResult(
        log_likelihood=float(ll[0]) if single else ll.copy(),
        node=node,
        variant=variant,
        seconds=time.perf_counter() - t0,
        chart=chart if keep_chart else None,
        stats=stats or {},
    )


# ---------------------------------------------------------------------------
# dense-table engines


def _dense_rules(dense, words):
    """Per-sentence rule tensors ``(b, A, p, B, C, q)`` for each direction."""
    loc = np.vectorize({w: i for i, w in enumerate(dense.words)}.__getitem__, otypes=[np.int64])(words)
    r = dense.log_binary[:, loc[:, :, None], :, :, :, loc[:, None, :]]  # (b, p, q, A, B, C, D)
    r = r.transpose(0, 3, 1, 4, 5, 6, 2)  # (b, A, p, B, C, D, q)
    start = dense.log_start[:, loc].transpose(1, 0, 2)  # (b, A, p)
    return ad.constant(r[..., LEFT, :]), ad.constant(r[..., RIGHT, :]), start


def _dense_start(start_vals, lengths):
    L = start_vals.shape[2]
    mask = np.where(np.arange(L)[None, None, :] < lengths[:, None, None], 0.0, NEG_INF)
    return ad.constant(start_vals + mask)


class _Naive:
    def __init__(self, rl, rr):
        self.rl, self.rr = rl, rr

    def completed(self, w, cell):
        pass

    def combine(self, w, n, chart):
        def run(ch, rl, rr):
            lw, rw = left_windows(ch, w, n), right_windows(ch, w, n)
            a1 = ad.log_einsum("biuBp,biuCq,bApBCq->biAp", lw, rw, rl, exact=True, optimize=False)
            a2 = ad.log_einsum("biuCq,biuBp,bApBCq->biAp", lw, rw, rr, exact=True, optimize=False)
            return ad.logaddexp(a1, a2)

        return _checkpointed(run, w, [chart], [self.rl, self.rr])


def _check_dense_sentences(dense, words, lengths):
    """Validate coverage and point padding at a covered word."""
    pad = np.arange(words.shape[1])[None, :] >= lengths[:, None]
    words = np.where(pad, dense.words[0], words)
    dense.local(np.unique(words))
    return words


def inside_naive(dense, sentences, lengths=None, keep_chart=False):
    """Literal double sum over split points and head positions (no caching)."""
    words, lengths, single = as_batch(sentences, lengths)
    words = _check_dense_sentences(dense, words, lengths)
    rl, rr, start = _dense_rules(dense, words)
    t0 = time.perf_counter()
    b, L = words.shape
    chart = _run_chart(_Naive(rl, rr), b, L, dense.n_nt, dense.n_sym)
    return _finish("naive", chart, _dense_start(start, lengths), lengths, dense.n_nt, single, t0, keep_chart)


def _headed_combine(w, n, chart, left_cache, right_cache):
    """Sum over split points and head symbols given non-head caches ``(b, k, A, p, B)``.

    ``left_cache`` is keyed by the right (non-head) child of a head-left
    rule, ``right_cache`` by the left child of a head-right rule.
    """
    t1 = _per_split(w, n, lambda u: ad.log_einsum(
        "biBp,biApB->biAp", _rows(chart[u], 0, n), _rows(left_cache[w - u], u, n)))
    t2 = _per_split(w, n, lambda u: ad.log_einsum(
        "biBp,biApB->biAp", _rows(chart[w - u], u, n), _rows(right_cache[u], 0, n)))
    return ad.logaddexp(_lse_split(t1), _lse_split(t2))


class _CacheCounter:
    """Counts reuse of cached (width, start) rows."""

    def __init__(self):
        self.seen = set()
        self.hits = 0
        self.writes = 0

    def read(self, w, starts):
        for s in starts:
            key = (w, s)
            if key in self.seen:
                self.hits += 1
            else:
                self.seen.add(key)


class _EisnerSatta:
    def __init__(self, rl, rr):
        self.rl, self.rr = rl, rr
        self.b1, self.b2 = {}, {}
        self.counter = _CacheCounter()

    def completed(self, w, cell):
        # keyed by the non-head child span: (k, A, p, head symbol)
        self.b1[w] = ad.log_einsum("bkCq,bApBCq->bkApB", cell, self.rl)
        self.b2[w] = ad.log_einsum("bkCq,bApBCq->bkApB", cell, self.rr)
        self.counter.writes += 2 * cell.shape[1]

    def combine(self, w, n, chart):
        for u in range(1, w):
            self.counter.read(("b1", w - u), range(u, u + n))
            self.counter.read(("b2", u), range(n))
        return _headed_combine(w, n, chart, self.b1, self.b2)


def inside_eisner_satta(dense, sentences, lengths=None, keep_chart=False):
    """Eisner-Satta rearrangement: cache the non-head-side sums per completed span."""
    words, lengths, single = as_batch(sentences, lengths)
    words = _check_dense_sentences(dense, words, lengths)
    rl, rr, start = _dense_rules(dense, words)
    t0 = time.perf_counter()
    b, L = words.shape
    eng = _EisnerSatta(rl, rr)
    chart = _run_chart(eng, b, L, dense.n_nt, dense.n_sym)
    stats = {"cache_hits": eng.counter.hits, "cache_writes": eng.counter.writes}
    return _finish("eisner_satta", chart, _dense_start(start, lengths), lengths, dense.n_nt, single, t0, keep_chart, stats)


# ---------------------------------------------------------------------------
# factored engines


class _Zhu:
    def __init__(self, rzl, rzr, cw, caching):
        self.rzl, self.rzr, self.cw = rzl, rzr, cw
        self.caching = caching
        self.c11, self.c12l, self.c12r = {}, {}, {}

    def completed(self, w, cell):
        # sum_q s[k, k+w, C, q] p(w_q | C)
        c11 = ad.log_einsum("bkCq,bCq->bkC", cell, self.cw)
        self.c11[w] = c11
        if self.caching == "C1_2":
            self.c12l[w] = ad.log_einsum("bkC,bApBC->bkApB", c11, self.rzl)
            self.c12r[w] = ad.log_einsum("bkC,bApBC->bkApB", c11, self.rzr)

    def combine(self, w, n, chart):
        if self.caching == "C1_1":
            def run(ch, c11, rzl, rzr):
                # the rule tensor is contracted with Term C1-1 anew for every split
                lw, rw = left_windows(ch, w, n), right_windows(ch, w, n)
                t1 = ad.log_einsum("biuBp,bApBC,biuC->biuAp", lw, rzl, right_windows(c11, w, n))
                t2 = ad.log_einsum("biuBp,bApBC,biuC->biuAp", rw, rzr, left_windows(c11, w, n))
                return ad.logaddexp(_lse_split(t1), _lse_split(t2))

            return _checkpointed(run, w, [chart, self.c11], [self.rzl, self.rzr])

        return _headed_combine(w, n, chart, self.c12l, self.c12r)


def inside_zhu(params, sentences, caching="C1_2", lengths=None, keep_chart=False):
    """Inside pass for ``p(B, D, C | A, w_p) p(w_q | C)`` with either caching."""
    if caching not in ("C1_1", "C1_2"):
        raise ValueError(f"unknown caching {caching!r}")
    words, lengths, single = as_batch(sentences, lengths)
    rule = ad.as_node(params.log_rule)
    rz = ad.transpose(ad.take(rule, words, axis=1), (1, 0, 2, 3, 4, 5))  # (b, A, p, B, D, C)
    rzl = ad.getitem(rz, (Ellipsis, LEFT, slice(None)))
    rzr = ad.getitem(rz, (Ellipsis, RIGHT, slice(None)))
    cw = ad.transpose(ad.take(ad.as_node(params.log_child_word), words, axis=1), (1, 0, 2))
    start = _start_scores(ad.as_node(params.log_root), ad.as_node(params.log_emit), words, lengths)
    t0 = time.perf_counter()
    b, L = words.shape
    chart = _run_chart(_Zhu(rzl, rzr, cw, caching), b, L, params.n_nt, params.n_sym)
    return _finish(f"zhu_{caching}", chart, start, lengths, params.n_nt, single, t0, keep_chart)


class _Nbl:
    def __init__(self, latent, heads, nonheads, wordpos, shared_head, arcs):
        self.latent = latent
        self.heads, self.nonheads, self.wordpos = heads, nonheads, wordpos
        self.shared_head = shared_head
        self.arcs = arcs
        self.h = ({}, {})
        self.eh = ({}, {})
        self.nh = ({}, {})

    def completed(self, w, cell):
        h0 = ad.log_einsum("bkBp,HB->bkpH", cell, self.heads[LEFT])
        self.h[LEFT][w] = h0
        self.h[RIGHT][w] = h0 if self.shared_head else ad.log_einsum("bkBp,HB->bkpH", cell, self.heads[RIGHT])
        for d in (LEFT, RIGHT):
            if self.arcs is None:
                # head-position tables enter every wider span; exponentiate them once here
                self.eh[d][w] = self.eh[LEFT][w] if d == RIGHT and self.shared_head else \
                    ad.shifted_exp(self.h[d][w].value, axis=2)
                self.nh[d][w] = ad.log_einsum("bkCq,HC,bHq->bkH", cell, self.nonheads[d], self.wordpos[d])
            else:
                nq = ad.log_einsum("bkCq,HC,bHq->bkqH", cell, self.nonheads[d], self.wordpos[d])
                self.nh[d][w] = ad.log_einsum("bkqH,bpq->bkpH", nq, self.arcs)

    def combine(self, w, n, chart):
        if self.arcs is None:
            h, eh, nh = self.h, self.eh, self.nh
            # head child on the left (i, i+u) or on the right (i+u, i+w)
            terms = [(h[LEFT][u], eh[LEFT][u], 0, nh[LEFT][w - u], u) for u in range(1, w)]
            terms += [(h[RIGHT][w - u], eh[RIGHT][w - u], u, nh[RIGHT][u], 0) for u in range(1, w)]
            return ad.log_einsum("bApH,bipH->biAp", self.latent, ad.log_window_sum(terms, n))

        spec = "biupH,biupH->bipH"

        def run(hl, hr, nl, nr, latent):
            x0 = ad.log_einsum(spec, left_windows(hl, w, n), right_windows(nl, w, n), exact=True)
            x1 = ad.log_einsum(spec, right_windows(hr, w, n), left_windows(nr, w, n), exact=True)
            return ad.log_einsum("bApH,bipH->biAp", latent, ad.logaddexp(x0, x1))

        return _checkpointed(run, w, [self.h[LEFT], self.h[RIGHT], self.nh[LEFT], self.nh[RIGHT]], [self.latent])


def sentence_latent(params, words):
    """Gather ``log p(H | A, w_p)`` for every position: ``(b, A, p, H)``."""
    if params.log_latent is None:
        raise GrammarError("params carry no p(H|A,w); pass latent= explicitly")
    lat = ad.take(ad.as_node(params.log_latent), words, axis=1)  # (A, b, L, H)
    return ad.transpose(lat, (1, 0, 2, 3))


def inside_nbl(params, sentences, lengths=None, latent=None, span_potentials=None,
               arc_potentials=None, root_potentials=None, keep_chart=False):
    """Inside pass for the latent-variable factorization.

    ``latent`` optionally supplies the per-sentence ``(b, A, p, H)``
    conditional (e.g. from a neural model). The optional potentials are
    log-space additive terms: ``span_potentials[b, i, j]`` on every cell of
    span ``(i, j)``, ``arc_potentials[b, p, q]`` on every rule attaching
    dependent ``q`` to head ``p``, ``root_potentials[b, p]`` on the start
    rule. Their gradients are the corresponding posterior marginals.
    """
    words, lengths, single = as_batch(sentences, lengths)
    if latent is None:
        latent = sentence_latent(params, words)
    heads, nonheads, wordpos = [], [], []
    for d in (LEFT, RIGHT):
        h, nh, wd = params.direction_factors(d)
        heads.append(h)
        nonheads.append(nh)
        wordpos.append(ad.transpose(ad.take(wd, words, axis=1), (1, 0, 2)))
    arcs = None if arc_potentials is None else ad.as_node(arc_potentials)
    root_pot = None if root_potentials is None else ad.as_node(root_potentials)
    start = _start_scores(ad.as_node(params.log_root), ad.as_node(params.log_emit), words, lengths, root_pot)
    t0 = time.perf_counter()
    b, L = words.shape
    eng = _Nbl(latent, heads, nonheads, wordpos, params.head_shared(), arcs)
    chart = _run_chart(eng, b, L, params.n_nt, params.n_sym, span_potentials)
    return _finish("nbl", chart, start, lengths, params.n_nt, single, t0, keep_chart)


# ---------------------------------------------------------------------------
# enumeration oracle


def _subtrees(i, j, n_nt, leaf_symbols):
    if j - i == 1:
        for s in leaf_symbols:
            yield Leaf(i, s)
        return
    for k in range(i + 1, j):
        for left in _subtrees(i, k, n_nt, leaf_symbols):
            for right in _subtrees(k, j, n_nt, leaf_symbols):
                for a in range(n_nt):
                    yield Binary(a, left.head, LEFT, left, right)
                    yield Binary(a, right.head, RIGHT, left, right)


def enumerate_lexicalized_trees(length, inventory, leaf_symbols=None):
    """Every lexicalized tree over ``length`` words, each exactly once.

    Leaves range over ``leaf_symbols`` (all symbols by default; trees with a
    nonterminal leaf have probability zero).
    """
    if not 2 <= length <= MAX_BRUTE_LENGTH:
        raise GrammarError(f"enumeration supports lengths 2..{MAX_BRUTE_LENGTH}, got {length}")
    if leaf_symbols is None:
        leaf_symbols = range(inventory.n_sym)
    yield from _subtrees(0, length, inventory.n_nt, tuple(leaf_symbols))


@lru_cache(maxsize=32)
def _skeletons(length, n_nt, n_sym):
    class _Inv:
        pass

    inv = _Inv()
    inv.n_nt, inv.n_sym = n_nt, n_sym
    roots, rules = [], []
    for t in enumerate_lexicalized_trees(length, inv, range(n_nt, n_sym)):
        (ra, rp), rs, _ = tree_rules(t)
        roots.append((ra, rp))
        rules.append(rs)
    return np.asarray(roots, dtype=np.int64), np.asarray(rules, dtype=np.int64)


def brute_force_log_likelihood(dense, sentences, chunk=512):
    """Vectorized enumeration over all trees for equal-length sentences: ``(b,)``.

    Each tree's score is the explicit sum of its rule scores; rule scores
    for every distinct (rule, position pair) are gathered once per batch.
    """
    sents = np.atleast_2d(np.asarray(sentences, dtype=np.int64))
    length = sents.shape[1]
    if not 2 <= length <= MAX_BRUTE_LENGTH:
        raise GrammarError(f"brute force supports lengths 2..{MAX_BRUTE_LENGTH}, got {length}")
    loc = np.asarray([dense.local(s) for s in sents], dtype=np.int64).T  # (l, b)
    roots, rules = _skeletons(length, dense.n_nt, dense.n_sym)
    n_rules = rules.shape[1]
    uniq, inv = np.unique(rules.reshape(-1, 6), axis=0, return_inverse=True)
    inv = inv.reshape(-1, n_rules)
    A, P, B, C, D, Q = (uniq[:, k, None] for k in range(6))
    rule_rows = dense.log_binary[A, loc[P[:, 0]], B, C, D, loc[Q[:, 0]]]  # (U, b)
    ru, rinv = np.unique(roots, axis=0, return_inverse=True)
    root_rows = dense.log_start[ru[:, 0, None], loc[ru[:, 1]]]  # (R, b)
    rinv = rinv.reshape(-1)
    # probability space is faster; fall back to log space on underflow
    prob = np.zeros(sents.shape[0])
    rule_p, root_p = np.exp(rule_rows), np.exp(root_rows)
    for lo in range(0, len(roots), chunk):
        val = root_p[rinv[lo:lo + chunk]]
        for r in range(n_rules):
            val *= rule_p[inv[lo:lo + chunk, r]]
        prob += val.sum(axis=0)
    if np.all(prob > 1e-250):
        return np.log(prob)
    total = np.full(sents.shape[0], NEG_INF)
    for lo in range(0, len(roots), chunk):
        val = root_rows[rinv[lo:lo + chunk]] + rule_rows[inv[lo:lo + chunk]].sum(axis=1)
        total = np.logaddexp(total, np_logsumexp(val, axis=0))
    return total


def inside_brute_force(dense, sentence):
    """Sum of exact tree probabilities over every lexicalized tree of ``sentence``."""
    t0 = time.perf_counter()
    words, lengths, single = as_batch(sentence)
    ll = brute_force_log_likelihood(dense, words)
    node = ad.constant(ll)
    return InsideResult(
        log_likelihood=float(ll[0]) if single else ll,
        node=node, variant="brute_force", seconds=time.perf_counter() - t0,
    )


VARIANTS = ("naive", "eisner_satta", "zhu_C1_1", "zhu_C1_2", "nbl")


def run_variant(variant, params, sentences, **kw):
    if variant == "naive":
        return inside_naive(params, sentences, **kw)
    if variant == "eisner_satta":
        return inside_eisner_satta(params, sentences, **kw)
    if variant in ("zhu_C1_1", "zhu_C1_2"):
        return inside_zhu(params, sentences, caching=variant[4:], **kw)
    if variant == "nbl":
        return inside_nbl(params, sentences, **kw)
    raise ValueError(f"unknown variant {variant!r}")


__all__ = [
    "InsideResult", "VARIANTS", "as_batch", "brute_force_log_likelihood",
    "enumerate_lexicalized_trees", "inside_brute_force", "inside_eisner_satta",
    "inside_naive", "inside_nbl", "inside_zhu", "run_variant", "sentence_latent",
]
