"""Viterbi decoding, posterior marginals and minimum-Bayes-risk decoding.

Marginals come from differentiating the inside pass with respect to
zero-valued log potentials attached to spans, arcs and the root rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .grammar import (
    LEFT, RIGHT, Binary, DenseLpcfg, GrammarError, Leaf, NblParams, ZhuParams,
    extract_dependencies, heads_array,
)
from .inside import as_batch, inside_nbl, sentence_latent

NEG_INF = -np.inf


@dataclass
class SpanMarginals:
    """``mu[i, j]`` is the posterior probability that ``(i, j)`` is a constituent."""

    mu: np.ndarray

    @property
    def length(self):
        return self.mu.shape[0] - 1


@dataclass
class ArcMarginals:
    """``mu[p, q]`` for head ``p`` and dependent ``q``; ``root[p]`` for the root word."""

    mu: np.ndarray
    root: np.ndarray

    @property
    def length(self):
        return self.root.shape[0]


@dataclass
class ParseOutput:
    """A decoded sentence.

    ``tree`` is a nested-tuple bracketing (leaves are word positions) and
    ``lex_tree`` the full lexicalized tree when Viterbi produced it.
    ``heads`` is 1-based with 0 marking the root word.
    """

    tree: object
    heads: np.ndarray
    log_likelihood: float = float("nan")
    score: float = float("nan")
    lex_tree: object = None


# ---------------------------------------------------------------------------
# bracketings as nested tuples


def bracketing_from_tree(tree):
    """Drop symbols and heads from a lexicalized tree."""
    if isinstance(tree, Leaf):
        return tree.position
    return (bracketing_from_tree(tree.left), bracketing_from_tree(tree.right))


def bracketing_spans(bracketing):
    """Spans ``(i, j)`` of every node with width at least 2."""
    out = []

    def walk(node, start):
        if isinstance(node, tuple):
            mid = walk(node[0], start)
            end = walk(node[1], mid)
            out.append((start, end))
            return end
        return start + 1

    walk(bracketing, 0)
    return out


def bracketing_to_string(bracketing, words=None, label="X"):
    """Render as ``(X (X a) (X b))``."""
    if isinstance(bracketing, tuple):
        return f"({label} {bracketing_to_string(bracketing[0], words, label)} " \
               f"{bracketing_to_string(bracketing[1], words, label)})"
    w = bracketing if words is None else words[bracketing]
    return f"({label} {w})"


def right_branching(length):
    """The right-branching bracketing over ``length`` words."""
    node = length - 1
    for i in range(length - 2, -1, -1):
        node = (i, node)
    return node


def left_branching(length):
    node = 0
    for i in range(1, length):
        node = (node, i)
    return node


# ---------------------------------------------------------------------------
# Viterbi


def _positional_rules(params, sentence, latent=None):
    """``(R_left, R_right, start)`` with rules indexed ``(A, p, B, C, q)``."""
    sentence = np.asarray(sentence, dtype=np.int64)
    if isinstance(params, DenseLpcfg):
        loc = np.asarray(params.local(sentence))
        r = params.log_binary[:, loc][:, :, :, :, :, loc]
        return r[..., LEFT, :], r[..., RIGHT, :], params.log_start[:, loc]
    root = ad.as_node(params.log_root).value
    emit = ad.as_node(params.log_emit).value
    start = root[:, None] + emit[:, sentence]
    if isinstance(params, ZhuParams):
        rule = ad.as_node(params.log_rule).value[:, sentence]  # (A, p, B, D, C)
        cw = ad.as_node(params.log_child_word).value[:, sentence]  # (C, q)
        out = [rule[:, :, :, d, :, None] + cw[None, None, None] for d in (LEFT, RIGHT)]
        return out[0], out[1], start
    if latent is None:
        lat = sentence_latent(params, sentence[None]).value[0]
    else:
        lat = ad.as_node(latent).value
        lat = lat[0] if lat.ndim == 4 else lat
    out = []
    for d in (LEFT, RIGHT):
        h, nh, wd = (x.value for x in params.direction_factors(d))
        wq = wd[:, sentence]  # (H, q)
        r = np.empty((lat.shape[0], len(sentence), h.shape[1], h.shape[1], len(sentence)))
        for p in range(len(sentence)):
            t = (lat[:, p, None, None, None, :] + h.T[None, :, None, None, :]
                 + nh.T[None, None, :, None, :] + wq.T[None, None, None, :, :])
            r[:, p] = logsumexp(t, axis=-1)
        out.append(r)
    return out[0], out[1], start


def viterbi_chart(r_left, r_right, start, n_nt, n_sym):
    """Max-product chart; returns ``(score, tree)`` of the best lexicalized tree.

    Ties go to the lower split point, then the lower head position, then
    the lower symbol index.
    """
    l = start.shape[1]
    if l < 2:
        raise GrammarError("sentences of length < 2 have no parse")
    M = n_sym
    chart, back = {}, {}
    base = np.full((l, M, l), NEG_INF)
    for i in range(l):
        base[i, n_nt:, i] = 0.0
    chart[1] = base
    # cache over the non-head child: best (q, C) per (A, p, B)
    cache = {LEFT: {}, RIGHT: {}}

    def fill_cache(w):
        for d, r in ((LEFT, r_left), (RIGHT, r_right)):
            vals, args = [], []
            for k in range(l - w + 1):
                x = r + chart[w][k][None, None, None]
                # (A, p, B, C, q) -> order (q, C) for the tie-break
                x = x.transpose(0, 1, 2, 4, 3).reshape(n_nt, l, M, l * M)
                a = np.argmax(x, axis=-1)
                vals.append(np.take_along_axis(x, a[..., None], -1)[..., 0])
                args.append(a)
            cache[d][w] = (np.stack(vals), np.stack(args))

    fill_cache(1)
    for w in range(2, l + 1):
        n = l - w + 1
        cell = np.full((n, M, l), NEG_INF)
        bp = np.zeros((n, n_nt, l), dtype=np.int64)
        for i in range(n):
            cands = []
            for u in range(1, w):
                k = i + u
                # head on the left: head child (i, k), non-head (k, j)
                left = chart[u][i].T[None] + cache[LEFT][w - u][0][k]
                # head on the right: head child (k, j), non-head (i, k)
                right = chart[w - u][k].T[None] + cache[RIGHT][u][0][i]
                cands.append(np.fmax(left, right))  # (A, p, B); one side is -inf
            c = np.stack(cands, axis=2).reshape(n_nt, l, (w - 1) * M)
            a = np.argmax(c, axis=-1)
            cell[i, :n_nt] = np.take_along_axis(c, a[..., None], -1)[..., 0]
            bp[i] = a
        chart[w] = cell
        back[w] = bp
        if w < l:
            fill_cache(w)

    top = chart[l][0][:n_nt] + start  # (A, p)
    flat = top.T.reshape(-1)  # order (p, A)
    best = int(np.argmax(flat))
    score = float(flat[best])
    if score == NEG_INF:
        return score, None
    p, A = divmod(best, n_nt)

    def build(i, w, X, p):
        if w == 1:
            return Leaf(i, X)
        u, B = divmod(int(back[w][i][X, p]), M)
        u += 1
        k = i + u
        if p < k:
            q, C = divmod(int(cache[LEFT][w - u][1][k][X, p, B]), M)
            return Binary(X, p, LEFT, build(i, u, B, p), build(k, w - u, C, q))
        q, C = divmod(int(cache[RIGHT][u][1][i][X, p, B]), M)
        return Binary(X, p, RIGHT, build(i, u, C, q), build(k, w - u, B, p))

    return score, build(0, l, A, p)


def viterbi_cyk(params, sentence, latent=None):
    """Exact max-product decoding of the best lexicalized tree.

    Works for dense tables and both factored parameterizations. The
    per-sentence rule tensor is materialized, so memory grows as
    ``n_N * l^2 * m^2``.
    """
    sentence = list(sentence)
    if len(sentence) < 2:
        raise GrammarError("sentences of length < 2 have no parse")
    r0, r1, start = _positional_rules(params, sentence, latent)
    score, tree = viterbi_chart(r0, r1, start, params.n_nt, params.n_sym)
    if tree is None:
        return ParseOutput(tree=None, heads=np.zeros(len(sentence), dtype=np.int64), score=score)
    arcs, root = extract_dependencies(tree)
    return ParseOutput(
        tree=bracketing_from_tree(tree),
        heads=heads_array(arcs, root, len(sentence)),
        score=score,
        lex_tree=tree,
    )


# ---------------------------------------------------------------------------
# marginals


def _frozen(params):
    return params.numpy() if isinstance(params, NblParams) else params


def compute_marginals(params, sentences, latent=None, lengths=None):
    """One inside/backward pass; returns ``(log_lik, spans, arcs, roots)`` arrays.

    ``spans`` is ``(b, L+1, L+1)``, ``arcs`` ``(b, L, L)`` indexed
    ``[head, dependent]`` and ``roots`` ``(b, L)``.
    """
    words, lengths, _ = as_batch(sentences, lengths)
    b, L = words.shape
    if latent is not None:
        latent = ad.constant(ad.as_node(latent).value)
    span = ad.leaf(np.zeros((b, L + 1, L + 1)))
    arc = ad.leaf(np.zeros((b, L, L)))
    root = ad.leaf(np.zeros((b, L)))
    res = inside_nbl(_frozen(params), words, lengths=lengths, latent=latent,
                     span_potentials=span, arc_potentials=arc, root_potentials=root)
    ad.backward(ad.sum_all(res.node))
    return res.node.value.copy(), span.grad, arc.grad, root.grad


def span_marginals(params, sentence, latent=None):
    """Posterior span probabilities for one sentence."""
    _, spans, _, _ = compute_marginals(params, [list(sentence)], latent=latent)
    return SpanMarginals(spans[0])


def arc_marginals(params, sentence, latent=None):
    """Posterior arc and root probabilities for one sentence."""
    _, _, arcs, roots = compute_marginals(params, [list(sentence)], latent=latent)
    return ArcMarginals(arcs[0], roots[0])


# ---------------------------------------------------------------------------
# MBR


def mbr_constituency(mu):
    """Binary bracketing maximizing the summed span marginals (ties: lower split)."""
    m = mu.mu if isinstance(mu, SpanMarginals) else np.asarray(mu)
    l = m.shape[0] - 1
    best = np.zeros((l + 1, l + 1))
    split = np.zeros((l + 1, l + 1), dtype=np.int64)
    for w in range(2, l + 1):
        for i in range(l - w + 1):
            j = i + w
            scores = [best[i, k] + best[k, j] for k in range(i + 1, j)]
            a = int(np.argmax(scores))
            split[i, j] = i + 1 + a
            best[i, j] = m[i, j] + scores[a]

    def build(i, j):
        if j - i == 1:
            return i
        k = int(split[i, j])
        return (build(i, k), build(k, j))

    return build(0, l)


def mbr_dependency(mu):
    """Projective tree maximizing summed arc marginals, exactly one root word.

    First-order Eisner over positions; returns 1-based ``heads`` with 0 for
    the root word.
    """
    if isinstance(mu, ArcMarginals):
        s, rho = mu.mu, mu.root
    else:
        s, rho = mu
    s = np.asarray(s, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    n = len(rho)
    # complete/incomplete tables; direction 0 = head at right end, 1 = head at left end
    C = np.full((n, n, 2), NEG_INF)
    I = np.full((n, n, 2), NEG_INF)
    Cb = np.zeros((n, n, 2), dtype=np.int64)
    Ib = np.zeros((n, n, 2), dtype=np.int64)
    for i in range(n):
        C[i, i] = 0.0
    for w in range(1, n):
        for i in range(n - w):
            j = i + w
            inner = [C[i, r, 1] + C[r + 1, j, 0] for r in range(i, j)]
            r = int(np.argmax(inner))
            I[i, j, 0] = inner[r] + s[j, i]  # j -> i
            I[i, j, 1] = inner[r] + s[i, j]  # i -> j
            Ib[i, j] = i + r
            left = [C[i, r, 0] + I[r, j, 0] for r in range(i, j)]
            r = int(np.argmax(left))
            C[i, j, 0], Cb[i, j, 0] = left[r], i + r
            right = [I[i, r, 1] + C[r, j, 1] for r in range(i + 1, j + 1)]
            r = int(np.argmax(right))
            C[i, j, 1], Cb[i, j, 1] = right[r], i + 1 + r
    total = [C[0, r, 0] + C[r, n - 1, 1] + rho[r] for r in range(n)]
    root = int(np.argmax(total))
    heads = np.zeros(n, dtype=np.int64)

    def complete(i, j, d):
        if i == j:
            return
        r = Cb[i, j, d]
        if d == 0:
            complete(i, r, 0)
            incomplete(r, j, 0)
        else:
            incomplete(i, r, 1)
            complete(r, j, 1)

    def incomplete(i, j, d):
        r = Ib[i, j, d]
        if d == 0:
            heads[i] = j + 1
        else:
            heads[j] = i + 1
        complete(i, r, 1)
        complete(r + 1, j, 0)

    complete(0, root, 0)
    complete(root, n - 1, 1)
    heads[root] = 0
    return heads


def mbr_parse(params, sentence, latent=None):
    """MBR bracketing and dependency tree from one marginal pass."""
    ll, spans, arcs, roots = compute_marginals(params, [list(sentence)], latent=latent)
    return ParseOutput(
        tree=mbr_constituency(SpanMarginals(spans[0])),
        heads=mbr_dependency(ArcMarginals(arcs[0], roots[0])),
        log_likelihood=float(ll[0]),
    )


__all__ = [
    "ArcMarginals", "ParseOutput", "SpanMarginals", "arc_marginals", "bracketing_from_tree",
    "bracketing_spans", "bracketing_to_string", "compute_marginals", "left_branching",
    "mbr_constituency", "mbr_dependency", "mbr_parse", "right_branching", "span_marginals",
    "viterbi_chart", "viterbi_cyk",
]
