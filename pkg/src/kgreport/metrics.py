"""Text-generation metrics and ROC/AUC, all computed from first principles.

BLEU-1..4 (corpus level, brevity penalty), ROUGE-L (LCS F-measure),
CIDEr (TF-IDF cosine over n=1..4, scaled by 10), a simplified METEOR
(exact + stem matching, no synonym resource), and micro-average ROC with
two independent AUC computations (trapezoid and rank statistic).
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .extraction import Token, lemmatize, pos_tag

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2


def ngram_counts(tokens: list[str], n: int) -> Counter:
    """Counter of the n-grams of a token list."""
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list[str]], references: list[list[str]], n: int = 4) -> float:
    """Corpus BLEU-n: clipped precision geometric mean times brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    clipped = [0] * n
    totals = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            cc = ngram_counts(cand, k)
            rc = ngram_counts(ref, k)
            clipped[k - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            totals[k - 1] += max(0, len(cand) - k + 1)
    if cand_len == 0:
        return 0.0
    if any(c == 0 for c in clipped) or any(t == 0 for t in totals):
        return 0.0
    log_prec = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str], beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure with the standard recall-weighted beta."""
    if not reference:
        warnings.warn("rouge_l: empty reference, score is 0")
        return 0.0
    if not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def corpus_rouge_l(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Mean ROUGE-L over cases."""
    if not candidates:
        return 0.0
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)


def cider(candidates: list[list[str]], references: list[list[str]], max_n: int = 4) -> float:
    """Mean TF-IDF cosine over n=1..4, scaled by 10.

    IDF is smoothed as ln((N + 1) / (df + 0.5)) over the reference corpus,
    which keeps single-document and all-identical corpora finite.
    """
    n_docs = len(references)
    if n_docs == 0:
        return 0.0
    if n_docs < 2:
        warnings.warn("cider: IDF over a single-document corpus is degenerate; smoothing applied")
    doc_freq: list[Counter] = [Counter() for _ in range(max_n)]
    for ref in references:
        for k in range(1, max_n + 1):
            for g in set(ngram_counts(ref, k)):
                doc_freq[k - 1][g] += 1

    def vec(tokens, k):
        counts = ngram_counts(tokens, k)
        return {g: c * math.log((n_docs + 1) / (doc_freq[k - 1][g] + 0.5))
                for g, c in counts.items()}

    score = 0.0
    for cand, ref in zip(candidates, references):
        per_n = 0.0
        for k in range(1, max_n + 1):
            cv = vec(cand, k)
            rv = vec(ref, k)
            dot = sum(w * rv[g] for g, w in cv.items() if g in rv)
            nc = math.sqrt(sum(w * w for w in cv.values()))
            nr = math.sqrt(sum(w * w for w in rv.values()))
            if nc > 0 and nr > 0:
                per_n += dot / (nc * nr)
        score += per_n / max_n
    return 10.0 * score / n_docs


def _stem(word: str) -> str:
    tok = Token(surface=word.lower())
    pos_tag([tok])
    return lemmatize(tok)


def meteor_simplified(candidate: list[str], reference: list[str]) -> float:
    """Unigram METEOR with exact then stem matching; no synonym resource.

    F_mean weights recall 9:1; the fragmentation penalty is
    0.5 * (chunks / matches)^3.
    """
    if not candidate or not reference:
        return 0.0
    cand = [w.lower() for w in candidate]
    ref = [w.lower() for w in reference]
    align = [-1] * len(cand)
    used = [False] * len(ref)
    for ci, w in enumerate(cand):
        for ri, r in enumerate(ref):
            if not used[ri] and w == r:
                align[ci] = ri
                used[ri] = True
                break
    cstems = [_stem(w) for w in cand]
    rstems = [_stem(r) for r in ref]
    for ci, s in enumerate(cstems):
        if align[ci] >= 0:
            continue
        for ri, r in enumerate(rstems):
            if not used[ri] and s == r:
                align[ci] = ri
                used[ri] = True
                break
    m = sum(1 for a in align if a >= 0)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = 10.0 * p * r / (r + 9.0 * p)
    chunks = 0
    prev_ri = None
    for a in align:
        if a < 0:
            prev_ri = None
            continue
        if prev_ri is None or a != prev_ri + 1:
            chunks += 1
        prev_ri = a
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def corpus_meteor(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Mean simplified METEOR over cases."""
    if not candidates:
        return 0.0
    return sum(meteor_simplified(c, r) for c, r in zip(candidates, references)) / len(candidates)


@dataclass(frozen=True)
class RocPoint:
    """One operating point of the ROC curve."""

    threshold: float
    fpr: float
    tpr: float


def roc_micro(scores, labels) -> list[RocPoint]:
    """Pooled threshold sweep over all (case, triple) pairs.

    Scores descend through unique thresholds; each point classifies
    score >= threshold as positive.  Needs both classes present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1D")
    pos = int(y.sum())
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [RocPoint(math.inf, 0.0, 0.0)]
    tp = fp = 0
    for i in range(y.size):
        tp += int(y_sorted[i])
        fp += int(~y_sorted[i])
        if i + 1 < y.size and s_sorted[i + 1] == s_sorted[i]:
            continue
        points.append(RocPoint(float(s_sorted[i]), fp / neg, tp / pos))
    return points


def auc(points: list[RocPoint]) -> float:
    """Trapezoidal area under a ROC point list."""
    if len(points) < 2:
        raise ValueError("AUC needs at least two ROC points")
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return area


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties (cross-check path)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos = int(y.sum())
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    sorted_s = s[order]
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - pos * (pos + 1) / 2.0
    return u / (pos * neg)


def roc_to_csv(points: list[RocPoint], path) -> None:
    """Write the curve as CSV (threshold, fpr, tpr)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fpr,tpr\n")
        for p in points:
            fh.write(f"{p.threshold},{p.fpr},{p.tpr}\n")
