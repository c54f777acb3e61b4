"""Treebank and dependency readers, preprocessing, vocabulary and batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PUNCT_TAGS = frozenset({"#", "$", "''", "(", ")", ",", ".", ":", "``", "-LRB-", "-RRB-"})
EMPTY_TAG = "-NONE-"
UNK = "<unk>"
DEFAULT_VOCAB_CAP = 10000


class CorpusError(ValueError):
    pass


@dataclass
class GoldSentence:
    """Tokens plus optional gold annotations.

    ``spans`` holds ``(i, j, label)`` triples for every phrasal node of
    width at least 1 (preterminals excluded); ``heads`` is 1-based with 0
    for the root word.
    """

    tokens: list
    tags: list = None
    spans: list = field(default_factory=list)
    heads: list = None

    def __len__(self):
        return len(self.tokens)

    def span_labels(self):
        """``{(i, j): label}`` keeping the outermost label of unary chains."""
        out = {}
        for i, j, lab in self.spans:
            out[(i, j)] = lab
        return out

    def unlabeled_spans(self):
        return {(i, j) for i, j, _ in self.spans}


# ---------------------------------------------------------------------------
# bracketed trees


def _tokenize(line):
    out, buf = [], []
    for ch in line:
        if ch in "()":
            if buf:
                out.append("".join(buf))
                buf = []
            out.append(ch)
        elif ch.isspace():
            if buf:
                out.append("".join(buf))
                buf = []
        else:
            buf.append(ch)
    if buf:
        out.append("".join(buf))
    return out


def parse_sexpr(line):
    """Parse one s-expression into nested ``[label, child, ...]`` lists (leaves are strings)."""
    toks = _tokenize(line)
    pos = 0

    def node():
        nonlocal pos
        if toks[pos] != "(":
            raise CorpusError(f"expected '(' at token {pos}")
        pos += 1
        label = ""
        if pos < len(toks) and toks[pos] not in "()":
            label = toks[pos]
            pos += 1
        kids = []
        while True:
            if pos >= len(toks):
                raise CorpusError("unbalanced brackets: missing ')'")
            t = toks[pos]
            if t == ")":
                pos += 1
                return [label] + kids
            if t == "(":
                kids.append(node())
            else:
                kids.append(t)
                pos += 1

    if not toks:
        raise CorpusError("empty tree")
    tree = node()
    if pos != len(toks):
        raise CorpusError("unbalanced brackets: trailing material")
    return tree


def strip_function_tags(label):
    if label.startswith("-") and label.endswith("-"):
        return label  # -NONE-, -LRB-
    for i, ch in enumerate(label):
        if ch in "-=" and i > 0:
            return label[:i]
    return label


def _prune_empty(tree):
    """Drop empty elements (-NONE-) and nodes left without words."""
    if isinstance(tree, str):
        return tree
    label, kids = tree[0], tree[1:]
    if label == EMPTY_TAG:
        return None
    kept = [k for k in (_prune_empty(k) for k in kids) if k is not None]
    return [label] + kept if kept else None


def tree_to_sentence(tree):
    """Tokens, tags and labeled phrasal spans of a nested-list tree."""
    tokens, tags, spans = [], [], []

    def walk(node):
        label, kids = node[0], node[1:]
        if len(kids) == 1 and isinstance(kids[0], str):
            tokens.append(kids[0])
            tags.append(label)
            return
        start = len(tokens)
        for k in kids:
            if isinstance(k, str):
                tokens.append(k)
                tags.append(label)
            else:
                walk(k)
        if label:
            spans.append((start, len(tokens), strip_function_tags(label)))

    # PTB files wrap each tree in an unlabeled root
    while len(tree) == 2 and tree[0] == "" and not isinstance(tree[1], str):
        tree = tree[1]
    walk(tree)
    return GoldSentence(tokens, tags, spans)


def read_bracketed_treebank(path):
    """One tree per line; blank lines are skipped with a warning."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                log.warning("%s:%d: empty line skipped", path, n)
                continue
            try:
                tree = _prune_empty(parse_sexpr(line))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{n}: {exc}") from None
            if tree is None:
                log.warning("%s:%d: tree without words skipped", path, n)
                continue
            out.append(tree_to_sentence(tree))
    return out


def spans_to_brackets(tokens, spans):
    """Re-serialize labeled spans (must be nested) as a bracketed string."""
    order = sorted(spans, key=lambda s: (s[0], -(s[1] - s[0])))

    def build(i, j, rest):
        parts, pos = [], i
        while pos < j:
            nxt = next((s for s in rest if s[0] == pos and s[1] <= j and (s[0], s[1]) != (i, j)), None)
            if nxt is None:
                parts.append(tokens[pos])
                pos += 1
            else:
                inner = [s for s in rest if s is not nxt and nxt[0] <= s[0] and s[1] <= nxt[1]]
                parts.append(f"({nxt[2]} {build(nxt[0], nxt[1], inner)})")
                rest = [s for s in rest if s not in inner and s is not nxt]
                pos = nxt[1]
        return " ".join(parts)

    top = [s for s in order if (s[0], s[1]) == (0, len(tokens))]
    if top:
        rest = [s for s in order if s is not top[0]]
        return f"({top[0][2]} {build(0, len(tokens), rest)})"
    return f"( {build(0, len(tokens), order)})"


# ---------------------------------------------------------------------------
# dependencies


def read_conll(path, treebank=None):
    """Head arrays from blank-line separated CoNLL blocks.

    Column 1 is the token index, column 2 the form and column 7 the head
    (0 for root). Lines with only three columns are read as
    ``index form head``. With ``treebank``, sentence lengths must match.
    """
    blocks, cur, forms, cur_forms = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                if cur:
                    blocks.append(cur)
                    forms.append(cur_forms)
                    cur, cur_forms = [], []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if "-" in cols[0] or "." in cols[0]:
                continue
            try:
                head = int(cols[6] if len(cols) > 6 else cols[2])
            except (IndexError, ValueError):
                raise CorpusError(f"{path}:{n}: malformed dependency line") from None
            cur.append(head)
            cur_forms.append(cols[1])
    if cur:
        blocks.append(cur)
        forms.append(cur_forms)
    if treebank is not None:
        if len(blocks) != len(treebank):
            raise CorpusError(f"{path}: {len(blocks)} dependency blocks but {len(treebank)} trees")
        for k, (heads, sent) in enumerate(zip(blocks, treebank)):
            if len(heads) != len(sent.tokens):
                raise CorpusError(
                    f"{path}: sentence {k} has {len(heads)} dependency tokens but {len(sent.tokens)} tree tokens")
            sent.heads = list(heads)
    return blocks


def read_conll_sentences(path):
    """Sentences with forms, tags (column 5, else 4) and heads from a CoNLL file."""
    out, toks, tags, heads = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(list(fh) + [""], 1):
            line = line.strip()
            if not line:
                if toks:
                    out.append(GoldSentence(toks, tags, [], heads))
                    toks, tags, heads = [], [], []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if "-" in cols[0] or "." in cols[0]:
                continue
            try:
                head = int(cols[6] if len(cols) > 6 else cols[2])
            except (IndexError, ValueError):
                raise CorpusError(f"{path}:{n}: malformed dependency line") from None
            toks.append(cols[1])
            tags.append(cols[4] if len(cols) > 4 and cols[4] != "_" else cols[3] if len(cols) > 3 else None)
            heads.append(head)
    for s in out:
        if any(t is None for t in s.tags):
            s.tags = None
    return out


def is_dependency_tree(heads):
    """True when 1-based ``heads`` form a tree with exactly one root."""
    n = len(heads)
    if sum(1 for h in heads if h == 0) != 1 or any(not 0 <= h <= n for h in heads):
        return False
    for t in range(1, n + 1):
        seen, cur = set(), t
        while cur != 0:
            if cur in seen:
                return False
            seen.add(cur)
            cur = heads[cur - 1]
    return True


# ---------------------------------------------------------------------------
# preprocessing


def strip_punctuation(sent, punct_tags=PUNCT_TAGS):
    """Remove punctuation tokens; returns ``None`` if fewer than 2 tokens remain.

    Spans are remapped (emptied or duplicated spans dropped) and heads that
    pointed at a removed token follow its head chain to the first kept
    token. If that chain reaches the root, the leftmost such token becomes
    the root and the others attach to it.
    """
    if sent.tags is None:
        raise CorpusError("punctuation removal needs POS tags")
    keep = [t not in punct_tags for t in sent.tags]
    if sum(keep) < 2:
        return None
    new_index = np.cumsum([0] + keep)  # old position -> new position (left boundary)
    tokens = [w for w, k in zip(sent.tokens, keep) if k]
    tags = [t for t, k in zip(sent.tags, keep) if k]
    spans, seen = [], set()
    for i, j, lab in sent.spans:
        a, b = int(new_index[i]), int(new_index[j])
        if b - a >= 1 and (a, b, lab) not in seen:
            seen.add((a, b, lab))
            spans.append((a, b, lab))
    heads = None
    if sent.heads is not None:
        old = sent.heads

        def resolve(h):
            while h != 0 and not keep[h - 1]:
                h = old[h - 1]
            return h

        raw = [resolve(old[t]) for t in range(len(old)) if keep[t]]
        renum = [0 if h == 0 else int(new_index[h - 1]) + 1 for h in raw]
        roots = [k for k, h in enumerate(renum) if h == 0]
        if len(roots) > 1:
            for k in roots[1:]:
                renum[k] = roots[0] + 1
        heads = renum
    return GoldSentence(tokens, tags, spans, heads)


def preprocess(sentences, strip=True):
    """Strip punctuation; drop sentences shorter than 2 tokens (counted in the log)."""
    out, dropped = [], 0
    for s in sentences:
        t = strip_punctuation(s) if strip and s.tags is not None else s
        if t is None or len(t) < 2:
            dropped += 1
            continue
        out.append(t)
    if dropped:
        log.info("dropped %d sentences shorter than 2 tokens", dropped)
    return out


def read_plain_text(path):
    """One whitespace-tokenized sentence per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                out.append(GoldSentence(toks))
    return out


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    words: list

    def __post_init__(self):
        if UNK not in self.words:
            self.words = list(self.words) + [UNK]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unk = self.index[UNK]

    def __len__(self):
        return len(self.words)

    def encode(self, tokens):
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids):
        return [self.words[i] for i in ids]


def build_vocab(sentences, cap=DEFAULT_VOCAB_CAP):
    """Most frequent ``cap`` forms (ties by first occurrence) plus UNK."""
    counts = Counter()
    first = {}
    for s in sentences:
        toks = s.tokens if isinstance(s, GoldSentence) else s
        for t in toks:
            counts[t] += 1
            first.setdefault(t, len(first))
    ranked = sorted(counts, key=lambda w: (-counts[w], first[w]))
    return Vocab(ranked[:cap])


# ---------------------------------------------------------------------------
# batching


def make_batches(sentences, batch_size=8, max_len=40, seed=0, epoch=0, min_len=2):
    """Length-grouped batches of sentence indices, shuffled deterministically per (seed, epoch)."""
    lengths = [len(s) for s in sentences]
    eligible = [k for k, n in enumerate(lengths) if min_len <= n <= max_len]
    rng = np.random.default_rng([seed, epoch])
    tiebreak = rng.permutation(len(eligible))
    order = sorted(range(len(eligible)), key=lambda k: (lengths[eligible[k]], tiebreak[k]))
    batches = [[eligible[k] for k in order[i:i + batch_size]] for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[k] for k in perm]


def pad_batch(encoded):
    """``(words (b, L), lengths (b,))`` with zero padding."""
    lengths = np.asarray([len(s) for s in encoded], dtype=np.int64)
    words = np.zeros((len(encoded), lengths.max()), dtype=np.int64)
    for b, s in enumerate(encoded):
        words[b, : len(s)] = s
    return words, lengths


__all__ = [
    "CorpusError", "GoldSentence", "PUNCT_TAGS", "UNK", "Vocab", "build_vocab", "is_dependency_tree",
    "make_batches", "pad_batch", "parse_sexpr", "preprocess", "read_bracketed_treebank", "read_conll",
    "read_conll_sentences", "read_plain_text", "spans_to_brackets", "strip_function_tags", "strip_punctuation", "tree_to_sentence",
]
