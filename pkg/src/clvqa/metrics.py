"""Caption-style answer metrics and continual-learning aggregates.

BLEU is corpus-level (clipped n-gram counts and lengths pooled over the
corpus). ROUGE-L and METEOR are sentence scores averaged over the corpus.
CIDEr uses document frequencies over the reference corpus. METEOR here is
the exact-match variant: no stemming, synonyms or paraphrases.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import entr

METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE_L", "CIDEr")
TEXT_METRICS = METRIC_NAMES[:6]

Tokens = Sequence[str]


def _tok(s) -> tuple[str, ...]:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def _check_corpus(candidates, references) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    return [_tok(c) for c in candidates], [_tok(r) for r in references]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU -------------------------------------------------------------------


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..``max_n`` with clipped counts and a corpus brevity penalty."""
    cands, refs = _check_corpus(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, max_n + 1):
            cc, rc = ngrams(c, n), ngrams(r, n)
            matched[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            total[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            # every higher order is zero as well
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# -- ROUGE-L ----------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    cand, ref = _tok(candidate), _tok(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l_corpus(candidates, references, beta: float = 1.2) -> float:
    cands, refs = _check_corpus(candidates, references)
    return float(np.mean([rouge_l(c, r, beta) for c, r in zip(cands, refs)]))


# -- METEOR (exact match) ---------------------------------------------------


def meteor_alignment(cand: Tokens, ref: Tokens) -> tuple[int, int]:
    """``(matches, chunks)`` of the exact-match alignment with the most
    matches and, among those, the fewest chunks."""
    cand, ref = tuple(cand), tuple(ref)
    options = [tuple(j for j, w in enumerate(ref) if w == c) for c in cand]

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> tuple[int, int]:
        # returns (matches, -chunks) for cand[i:], prev = ref index aligned to cand[i-1] or -2
        if i == len(cand):
            return (0, 0)
        result = best(i + 1, used, -2)
        for j in options[i]:
            if used >> j & 1:
                continue
            m, neg_chunks = best(i + 1, used | (1 << j), j)
            new_chunk = 0 if j == prev + 1 else 1
            cand_val = (m + 1, neg_chunks - new_chunk)
            if cand_val > result:
                result = cand_val
        return result

    m, neg_chunks = best(0, 0, -2)
    return m, -neg_chunks


def meteor_exact(candidate, reference, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    cand, ref = _tok(candidate), _tok(reference)
    if not cand or not ref:
        return 0.0
    m, chunks = meteor_alignment(cand, ref)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1 - penalty)


def meteor_corpus(candidates, references) -> float:
    cands, refs = _check_corpus(candidates, references)
    return float(np.mean([meteor_exact(c, r) for c, r in zip(cands, refs)]))


# -- CIDEr ------------------------------------------------------------------


def _tfidf_vec(counts: Counter, df: Counter, n_docs: int) -> dict:
    return {g: k * math.log(n_docs / (1.0 + df[g])) for g, k in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(candidates, references, max_n: int = 4) -> float:
    """Plain CIDEr (no CIDEr-D clipping or length penalty), in [0, 10]."""
    cands, refs = _check_corpus(candidates, references)
    n_docs = len(refs)
    per_order = []
    for n in range(1, max_n + 1):
        ref_counts = [ngrams(r, n) for r in refs]
        df: Counter = Counter()
        for rc in ref_counts:
            df.update(rc.keys())
        sims = [_cosine(_tfidf_vec(ngrams(c, n), df, n_docs), _tfidf_vec(rc, df, n_docs))
                for c, rc in zip(cands, ref_counts)]
        per_order.append(10.0 * float(np.mean(sims)))
    return float(np.mean(per_order))


# -- entropy ----------------------------------------------------------------


def entropy(probs) -> float:
    """Natural-log entropy with ``0 log 0 = 0``."""
    return float(entr(np.asarray(probs, dtype=np.float64)).sum())


# -- corpus report ----------------------------------------------------------


def score_corpus(candidates, references) -> dict[str, float]:
    """All metrics in ``METRIC_NAMES`` order; text metrics in [0, 1], CIDEr in [0, 10]."""
    out = dict(zip(METRIC_NAMES[:4], bleu(candidates, references, 4)))
    out["METEOR"] = meteor_corpus(candidates, references)
    out["ROUGE_L"] = rouge_l_corpus(candidates, references)
    out["CIDEr"] = cider(candidates, references)
    return out


def to_points(metric: str, value: float) -> float:
    """Scale to the reporting convention: x100 for text metrics, raw CIDEr."""
    return value * 100.0 if metric in TEXT_METRICS else value


# -- score matrix -----------------------------------------------------------


@dataclass
class ScoreMatrix:
    """``a[t, j]``: metric on task ``j`` after training through task ``t`` (1-based)."""

    metric: str
    tasks: list[str]
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def set(self, t: int, j: int, value: float) -> None:
        if not (1 <= j <= len(self.tasks) and 1 <= t <= len(self.tasks)):
            raise IndexError(f"entry ({t}, {j}) outside a {len(self.tasks)}-task matrix")
        self.values[(t, j)] = float(value)

    def get(self, t: int, j: int) -> float:
        return self.values[(t, j)]

    @property
    def checkpoints(self) -> list[int]:
        return sorted({t for t, _ in self.values})

    @property
    def final(self) -> int:
        return max(self.checkpoints)

    def lower_triangular_complete(self) -> bool:
        cps = self.checkpoints
        return all((t, j) in self.values for t in cps for j in range(1, t + 1))


class ForgettingUndefined(ValueError):
    pass


def average(matrix: ScoreMatrix) -> float:
    N = matrix.final
    tasks = range(1, len(matrix.tasks) + 1) if len(matrix.checkpoints) == 1 else range(1, N + 1)
    return float(np.mean([matrix.get(N, j) for j in tasks]))


def forgetting(matrix: ScoreMatrix) -> float:
    N = matrix.final
    if N < 2 or len(matrix.checkpoints) < 2:
        raise ForgettingUndefined("forgetting needs at least two sequential checkpoints")
    gaps = []
    for j in range(1, N):
        best = max(matrix.get(t, j) for t in range(j, N))
        gaps.append(best - matrix.get(N, j))
    return float(np.mean(gaps))


def aggregates(matrix: ScoreMatrix) -> tuple[float, float]:
    """``(average over the final row, mean drop from each task's best earlier score)``."""
    return average(matrix), forgetting(matrix)


# -- files ------------------------------------------------------------------


def read_predictions(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>candidate<TAB>reference")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def write_predictions(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, cand, ref in rows:
            fh.write(f"{sid}\t{cand}\t{ref}\n")


SCORE_HEADER = ("checkpoint", "task", "metric", "value")


def fmt(x: float) -> str:
    return repr(float(x))


def write_score_rows(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for cp, task, metric, value in rows:
            w.writerow((cp, task, metric, fmt(value)))


def read_score_rows(path: str | Path) -> list[tuple[int, str, str, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != SCORE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(cp), task, metric, float(v)) for cp, task, metric, v in r]


def matrices_from_rows(rows, tasks: list[str]) -> dict[str, ScoreMatrix]:
    out: dict[str, ScoreMatrix] = {}
    index = {t: i + 1 for i, t in enumerate(tasks)}
    for cp, task, metric, value in rows:
        m = out.setdefault(metric, ScoreMatrix(metric, list(tasks)))
        m.set(cp, index[task], value)
    return out
