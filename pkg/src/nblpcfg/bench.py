"""Timing harness for the inside variants: forward plus backward, batch size 1."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .grammar import NblParams, ZhuParams, random_nbl_params, random_zhu_params
from .inside import run_variant

BENCH_COLUMNS = ("variant", "l", "n_nt", "d_h", "rep", "seconds")
FACTORED_VARIANTS = ("nbl", "zhu_C1_1", "zhu_C1_2")


def split_symbols(m):
    """Nonterminal/preterminal split used for a total symbol count ``m`` (ratio 1:2)."""
    n_nt = max(1, m // 3)
    return n_nt, max(1, m - n_nt)


def _leafify(params):
    if isinstance(params, NblParams):
        fields = [None if f is None else ad.leaf(f) for f in (
            params.log_root, params.log_emit, params.log_latent, params.log_head,
            params.log_nonhead, params.log_word, params.log_dir)]
        return NblParams(*fields, binding=params.binding)
    return ZhuParams(*(ad.leaf(f) for f in (params.log_root, params.log_emit, params.log_rule,
                                            params.log_child_word)))


def bench_params(variant, l, m, d_h, seed):
    """Fresh random parameters over a sentence-local vocabulary of ``l`` word types."""
    n_nt, n_pt = split_symbols(m)
    rng = np.random.default_rng(seed)
    if variant == "nbl":
        return _leafify(random_nbl_params(n_nt, n_pt, l, d_h, rng=rng))
    if variant.startswith("zhu"):
        return _leafify(random_zhu_params(n_nt, n_pt, l, rng=rng))
    raise ValueError(f"benchmark supports {FACTORED_VARIANTS}, got {variant!r}")


def time_forward_backward(variant, params, sentence):
    t0 = time.perf_counter()
    res = run_variant(variant, params, [sentence])
    ad.backward(ad.sum_all(res.node))
    return time.perf_counter() - t0


def time_cell(variant, l, m, d_h, reps=3, seed=0, warmup=1):
    """Seconds per repetition (warm-up discarded), or ``None`` on out-of-memory."""
    try:
        params = bench_params(variant, l, m, d_h, seed)
        sentence = list(range(l))
        for _ in range(warmup):
            time_forward_backward(variant, params, sentence)
        return [time_forward_backward(variant, params, sentence) for _ in range(reps)]
    except MemoryError:
        return None


@dataclass
class BenchRow:
    variant: str
    l: int
    n_nt: int
    d_h: int
    rep: object
    seconds: object


def run_grid(variants, lengths, m_values, d_h_values=(300,), reps=3, seed=0, progress=None):
    """Every (variant, l, m, d_H) cell; one row per repetition, ``oom`` marks failures.

    One discarded warm-up run precedes the first cell of each variant; later
    cells reuse the warmed-up process.
    """
    rows = []
    for variant in variants:
        warm = 1
        for l in lengths:
            for m in m_values:
                for d_h in d_h_values if variant == "nbl" else d_h_values[:1]:
                    times = time_cell(variant, l, m, d_h, reps, seed, warmup=warm)
                    warm = 0 if times is not None else warm
                    if times is None:
                        rows.append(BenchRow(variant, l, m, d_h, "oom", "oom"))
                    else:
                        rows += [BenchRow(variant, l, m, d_h, r, t) for r, t in enumerate(times)]
                    if progress is not None:
                        progress(rows[-1])
    return rows


def medians(rows):
    """``{(variant, l, m, d_h): median seconds}`` over finished cells."""
    cells = {}
    for r in rows:
        if r.seconds != "oom":
            cells.setdefault((r.variant, r.l, r.n_nt, r.d_h), []).append(r.seconds)
    return {k: float(np.median(v)) for k, v in cells.items()}


def fit_slope(xs, ys):
    """Least-squares slope of ``log y`` against ``log x``."""
    xs, ys = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    if len(xs) < 2:
        return float("nan")
    return float(np.polyfit(xs, ys, 1)[0])


def slopes(rows):
    """Per variant: slope versus m at each fixed l, and versus l at each fixed m."""
    med = medians(rows)
    out = []
    keys = sorted({(v, d) for v, _, _, d in med})
    for v, d in keys:
        ls = sorted({l for vv, l, _, dd in med if vv == v and dd == d})
        ms = sorted({m for vv, _, m, dd in med if vv == v and dd == d})
        for l in ls:
            pts = [(m, med[(v, l, m, d)]) for m in ms if (v, l, m, d) in med]
            if len(pts) >= 2:
                out.append({"variant": v, "d_h": d, "axis": "m", "fixed": l,
                            "slope": fit_slope(*zip(*pts))})
        for m in ms:
            pts = [(l, med[(v, l, m, d)]) for l in ls if (v, l, m, d) in med]
            if len(pts) >= 2:
                out.append({"variant": v, "d_h": d, "axis": "l", "fixed": m,
                            "slope": fit_slope(*zip(*pts))})
    return out


def rows_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        sec = r.seconds if r.seconds == "oom" else f"{r.seconds:.6f}"
        w.writerow([r.variant, r.l, r.n_nt, r.d_h, r.rep, sec])
    return buf.getvalue()


def slopes_csv(fits):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "d_h", "axis", "fixed", "slope"))
    for f in fits:
        w.writerow((f["variant"], f["d_h"], f["axis"], f["fixed"], f"{f['slope']:.4f}"))
    return buf.getvalue()


__all__ = [
    "BENCH_COLUMNS", "BenchRow", "FACTORED_VARIANTS", "bench_params", "fit_slope", "medians",
    "rows_csv", "run_grid", "slopes", "slopes_csv", "split_symbols", "time_cell", "time_forward_backward",
]
