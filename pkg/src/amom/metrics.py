"""Corpus BLEU-4, ROUGE-1/2/L, character edit similarity, length-bucketed
BLEU, and wall-clock latency measurement.

BLEU is computed on token sequences exactly as decoded (no smoothing, no
re-tokenization); parity with external scorers is out of scope.
"""

import time
from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    match_counts: list[int]
    total_counts: list[int]


@dataclass
class RougeReport:
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float


@dataclass
class LatencyReport:
    ar_ms: float
    nar_ms: dict[int, float]
    speedup: dict[int, float]
    raw_ar: list[float]
    raw_nar: dict[int, list[float]]


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps, refs, max_n: int = 4) -> BleuReport:
    """Clipped corpus-level n-gram precision, geometric mean, BP."""
    if len(hyps) != len(refs) or not hyps:
        raise ValueError(f"need equal, nonzero corpus sizes; got {len(hyps)}/{len(refs)}")
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            total[n - 1] += max(len(h) - n + 1, 0)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    precisions = [m / t if t else 0.0 for m, t in zip(match, total)]
    if hyp_len == 0 or any(p == 0.0 for p in precisions):
        bleu = 0.0
        bp = 0.0 if hyp_len == 0 else (1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len)))
    else:
        bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len))
        bleu = bp * float(np.exp(np.mean([np.log(p) for p in precisions]))) * 100.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len, match, total)


def _f1(overlap: float, hyp_total: int, ref_total: int) -> float:
    if hyp_total == 0 and ref_total == 0:
        return 1.0  # nothing to get wrong
    if hyp_total == 0 or ref_total == 0 or overlap == 0:
        return 0.0
    p = overlap / hyp_total
    r = overlap / ref_total
    return 2.0 * p * r / (p + r)


def lcs_length(a, b) -> int:
    """Longest common subsequence length by DP."""
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_scores(hyps, refs) -> RougeReport:
    """Mean per-pair F1 for unigram/bigram overlap and LCS."""
    if len(hyps) != len(refs) or not hyps:
        raise ValueError(f"need equal, nonzero corpus sizes; got {len(hyps)}/{len(refs)}")
    f1s, f2s, fls = [], [], []
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        for n, acc in ((1, f1s), (2, f2s)):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            overlap = sum(min(c, rc[g]) for g, c in hc.items())
            acc.append(_f1(overlap, sum(hc.values()), sum(rc.values())))
        fls.append(_f1(lcs_length(h, r), len(h), len(r)))
    return RougeReport(
        100.0 * float(np.mean(f1s)),
        100.0 * float(np.mean(f2s)),
        100.0 * float(np.mean(fls)),
    )


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_similarity(hyps: list[str], refs: list[str]) -> float:
    """Mean of 100*(1 - lev(h, r)/max(|h|, |r|)); an empty-empty pair is 100."""
    if len(hyps) != len(refs) or not hyps:
        raise ValueError(f"need equal, nonzero corpus sizes; got {len(hyps)}/{len(refs)}")
    scores = []
    for h, r in zip(hyps, refs):
        denom = max(len(h), len(r))
        scores.append(100.0 if denom == 0 else 100.0 * (1.0 - levenshtein(h, r) / denom))
    return float(np.mean(scores))


def bucketed_bleu(hyps, refs, sources, edges) -> dict[str, BleuReport]:
    """BLEU per source-length bucket; buckets [0,e1), [e1,e2), ..., [ek,inf)."""
    edges = list(edges)
    if edges != sorted(edges) or len(set(edges)) != len(edges):
        raise ValueError(f"bucket edges must be strictly increasing, got {edges}")
    if not (len(hyps) == len(refs) == len(sources)):
        raise ValueError("hyps/refs/sources must align")
    bounds = [0] + edges + [None]
    grouped: dict[str, tuple[list, list]] = {}
    for h, r, s in zip(hyps, refs, sources):
        L = len(list(s))
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi is None or L < hi:
                if L >= lo:
                    label = f"len[{lo},{'inf' if hi is None else hi})"
                    grouped.setdefault(label, ([], []))
                    grouped[label][0].append(h)
                    grouped[label][1].append(r)
                break
    return {label: corpus_bleu(hs, rs) for label, (hs, rs) in grouped.items()}


def measure_latency(nar_model, ar_model, sources, t_list, decode_config,
                    warmup: int = 3) -> LatencyReport:
    """Batch-1 wall-clock per sentence; >=3 warmup decodes excluded."""
    from .inference import DecodeConfig, ar_greedy_decode, decode_with_length_beam

    if not sources:
        raise ValueError("empty latency sample")
    if warmup < 3:
        raise ValueError("need at least 3 warmup runs")
    base = decode_config

    for s in sources[:warmup]:
        ar_greedy_decode(ar_model, s, base.max_output_length)
        decode_with_length_beam(nar_model, s, base)

    raw_ar = []
    for s in sources:
        t0 = time.perf_counter()
        ar_greedy_decode(ar_model, s, base.max_output_length)
        raw_ar.append((time.perf_counter() - t0) * 1e3)

    raw_nar: dict[int, list[float]] = {}
    for T in t_list:
        cfg = DecodeConfig(T=T, length_beam=base.length_beam,
                           dedup_consecutive=base.dedup_consecutive,
                           max_output_length=base.max_output_length)
        times = []
        for s in sources:
            t0 = time.perf_counter()
            decode_with_length_beam(nar_model, s, cfg)
            times.append((time.perf_counter() - t0) * 1e3)
        raw_nar[T] = times

    ar_ms = float(np.mean(raw_ar))
    nar_ms = {T: float(np.mean(v)) for T, v in raw_nar.items()}
    speedup = {T: ar_ms / v for T, v in nar_ms.items()}
    return LatencyReport(ar_ms, nar_ms, speedup, raw_ar, raw_nar)
