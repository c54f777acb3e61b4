"""Unlabeled parsing metrics and report formatting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

REPORT_COLUMNS = ("f1_mean", "f1_std", "udas", "uuas", "ppl")
TABLE_LABELS = ("NP", "VP", "PP", "SBAR", "ADJP", "ADVP")


class EvalError(ValueError):
    pass


def _nontrivial(spans, length):
    out = set()
    for i, j in spans:
        if not 0 <= i < j <= length:
            raise EvalError(f"span ({i}, {j}) out of range for length {length}")
        if j - i > 1 and not (i == 0 and j == length):
            out.add((i, j))
    return out


def sentence_f1(pred, gold, length):
    """Unlabeled F1 after removing single-word and whole-sentence spans.

    Both sides empty counts as 1.0, exactly one side empty as 0.0.
    """
    p = _nontrivial(pred, length)
    g = _nontrivial(gold, length)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    tp = len(p & g)
    if tp == 0:
        return 0.0
    prec, rec = tp / len(p), tp / len(g)
    return 2 * prec * rec / (prec + rec)


def corpus_f1(preds, golds, lengths):
    """Mean of per-sentence F1."""
    scores = [sentence_f1(p, g, n) for p, g, n in zip(preds, golds, lengths)]
    return float(np.mean(scores)) if scores else float("nan")


def attachment_scores(pred, gold):
    """``(UDAS, UUAS)`` for 1-based head arrays with 0 for the root."""
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise EvalError(f"head arrays differ in length: {len(pred)} vs {len(gold)}")
    if not gold:
        raise EvalError("empty sentence")
    directed = sum(int(p == g) for p, g in zip(pred, gold))
    gold_pairs = {frozenset((t, h)) for t, h in enumerate(gold, 1)}
    undirected = sum(int(frozenset((t, h)) in gold_pairs) for t, h in enumerate(pred, 1))
    n = len(gold)
    return directed / n, undirected / n


def corpus_attachment(preds, golds):
    """Token-weighted UDAS/UUAS over a corpus."""
    d = u = n = 0
    for p, g in zip(preds, golds):
        a, b = attachment_scores(p, g)
        d += a * len(g)
        u += b * len(g)
        n += len(g)
    return (d / n, u / n) if n else (float("nan"), float("nan"))


def label_recall(preds, golds, lengths, labels=None):
    """Micro recall per gold label; trivial spans removed, absent labels omitted.

    ``golds`` holds ``(i, j, label)`` triples per sentence.
    """
    hit, total = {}, {}
    for pred, gold, n in zip(preds, golds, lengths):
        p = _nontrivial(pred, n)
        for i, j, lab in gold:
            if labels is not None and lab not in labels:
                continue
            if j - i <= 1 or (i == 0 and j == n):
                continue
            total[lab] = total.get(lab, 0) + 1
            hit[lab] = hit.get(lab, 0) + int((i, j) in p)
    return {lab: hit[lab] / total[lab] for lab in total}


def aggregate_runs(values):
    """``(mean, population std)`` of per-seed values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise EvalError("no runs to aggregate")
    return float(arr.mean()), float(arr.std())


def format_mean_std(values, scale=100.0, digits=1):
    """``"60.4 ± 1.6"`` style."""
    mean, std = aggregate_runs(values)
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"


@dataclass
class EvalReport:
    f1_mean: float
    f1_std: float
    udas: float
    uuas: float
    ppl: float
    label_recall: dict = field(default_factory=dict)
    n_sentences: int = 0

    def row(self):
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


def aggregate_reports(reports):
    """One report from per-seed reports: F1 mean/std, other metrics averaged."""
    f1 = [r.f1_mean for r in reports]
    mean, std = aggregate_runs(f1)
    labels = sorted({k for r in reports for k in r.label_recall})
    recall = {k: float(np.mean([r.label_recall[k] for r in reports if k in r.label_recall])) for k in labels}
    return EvalReport(
        f1_mean=mean, f1_std=std,
        udas=float(np.mean([r.udas for r in reports])),
        uuas=float(np.mean([r.uuas for r in reports])),
        ppl=float(np.mean([r.ppl for r in reports])),
        label_recall=recall,
        n_sentences=reports[0].n_sentences,
    )


def report_csv(reports):
    """CSV text with exactly the report columns, one row per report."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: f"{v:.6f}" for k, v in r.row().items()})
    return buf.getvalue()


def label_recall_csv(recall):
    buf = io.StringIO()
    buf.write("label,recall\n")
    for lab in sorted(recall):
        buf.write(f"{lab},{recall[lab]:.6f}\n")
    return buf.getvalue()


def report_text(report, seeds_f1=None):
    """Aligned text table in the usual results layout (scores in percent)."""
    f1 = format_mean_std(seeds_f1) if seeds_f1 is not None else f"{report.f1_mean * 100:.1f} ± {report.f1_std * 100:.1f}"
    rows = [("F1", f1), ("UDAS", f"{report.udas * 100:.1f}"), ("UUAS", f"{report.uuas * 100:.1f}"),
            ("Perplexity", f"{report.ppl:.1f}")]
    labels = [lab for lab in TABLE_LABELS if lab in report.label_recall]
    labels += sorted(k for k in report.label_recall if k not in TABLE_LABELS)
    rows += [(f"{lab} recall", f"{report.label_recall[lab] * 100:.1f}") for lab in labels]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


__all__ = [
    "EvalError", "EvalReport", "REPORT_COLUMNS", "aggregate_reports", "aggregate_runs",
    "attachment_scores", "corpus_attachment", "corpus_f1", "format_mean_std", "label_recall",
    "label_recall_csv", "report_csv", "report_text", "sentence_f1",
]
