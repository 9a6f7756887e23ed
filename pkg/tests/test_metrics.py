"""Metric behaviour against independent brute-force oracles plus the
hand-computed worked examples."""

import numpy as np
import pytest

from conftest import tiny_model
from oracles import oracle_bleu, oracle_lcs, oracle_lev, random_corpus
from amom.inference import DecodeConfig
from amom.metrics import (
    bucketed_bleu,
    corpus_bleu,
    edit_similarity,
    lcs_length,
    levenshtein,
    measure_latency,
    rouge_scores,
)


def test_bleu_matches_oracle_on_100_random_corpora():
    rng = np.random.default_rng(42)
    for trial in range(100):
        hyps, refs = random_corpus(rng, int(rng.integers(1, 5)))
        if sum(len(h) for h in hyps) == 0:
            hyps[0] = ["a"]
        got = corpus_bleu(hyps, refs).bleu
        want = oracle_bleu(hyps, refs)
        assert got == pytest.approx(want, abs=1e-9), (trial, hyps, refs)


def test_lcs_matches_recursive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = rng.integers(0, 3, size=rng.integers(0, 13)).tolist()
        b = rng.integers(0, 3, size=rng.integers(0, 13)).tolist()
        assert lcs_length(a, b) == oracle_lcs(a, b)


def test_levenshtein_matches_recursive_oracle():
    rng = np.random.default_rng(8)
    letters = "abc"
    for _ in range(100):
        a = "".join(letters[i] for i in rng.integers(0, 3, size=rng.integers(0, 11)))
        b = "".join(letters[i] for i in rng.integers(0, 3, size=rng.integers(0, 11)))
        assert levenshtein(a, b) == oracle_lev(a, b)


# ---------------------------------------------------------------------
# worked examples


def test_bleu_identical_is_100():
    hyps = [["a", "b", "c", "d", "e"], ["d", "c", "b", "a"]]
    rep = corpus_bleu(hyps, hyps)
    assert rep.bleu == pytest.approx(100.0)
    assert rep.brevity_penalty == 1.0


def test_bleu_zero_without_any_fourgram():
    # a corpus of sub-4-token sentences has p4 == 0, hence BLEU-4 == 0
    rep = corpus_bleu([["a", "b", "c"]], [["a", "b", "c"]])
    assert rep.total_counts[3] == 0
    assert rep.bleu == 0.0


def test_bleu_clipping_example():
    rep = corpus_bleu([["the", "the", "the"]], [["the", "cat"]])
    assert rep.precisions[0] == pytest.approx(1 / 3)
    assert rep.bleu == 0.0  # no bigram match


def test_bleu_disjoint_vocab_zero():
    assert corpus_bleu([["a", "b"]], [["c", "d"]]).bleu == 0.0


def test_bleu_brevity_penalty_formula():
    # 4 identical tokens against a 5-token reference: all precisions 1
    rep = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    assert rep.brevity_penalty == pytest.approx(np.exp(1.0 - 5 / 4))
    assert rep.bleu == pytest.approx(100.0 * np.exp(1.0 - 5 / 4))
    longer = corpus_bleu([["a", "b", "c", "d", "e"]], [["a", "b", "c", "d"]])
    assert longer.brevity_penalty == 1.0


def test_bleu_report_internal_consistency():
    rng = np.random.default_rng(5)
    hyps, refs = random_corpus(rng, 6)
    hyps = [h or ["a"] for h in hyps]
    rep = corpus_bleu(hyps, refs)
    assert 0.0 <= rep.bleu <= 100.0
    if all(p > 0 for p in rep.precisions):
        recomputed = rep.brevity_penalty * np.exp(np.mean(np.log(rep.precisions))) * 100
        assert rep.bleu == pytest.approx(recomputed, abs=1e-9)
    assert rep.hyp_len == sum(len(h) for h in hyps)
    assert rep.ref_len == sum(len(r) for r in refs)


def test_rouge_worked_example():
    rep = rouge_scores([["a", "b", "c"]], [["a", "c"]])
    assert rep.rouge1_f == pytest.approx(80.0)
    assert rep.rougeL_f == pytest.approx(80.0)  # LCS = 2
    assert rep.rouge2_f == 0.0  # bigrams (a,b),(b,c) vs (a,c)


def test_rouge_identical_and_disjoint():
    same = rouge_scores([["x", "y"]], [["x", "y"]])
    assert (same.rouge1_f, same.rouge2_f, same.rougeL_f) == (100.0, 100.0, 100.0)
    none = rouge_scores([["x", "q"]], [["y", "z"]])
    assert (none.rouge1_f, none.rouge2_f, none.rougeL_f) == (0.0, 0.0, 0.0)


def test_edit_similarity_examples():
    assert edit_similarity(["abc"], ["abc"]) == pytest.approx(100.0)
    assert edit_similarity(["abc"], ["abd"]) == pytest.approx(100.0 * (1 - 1 / 3))
    assert edit_similarity([""], ["ab"]) == 0.0
    assert edit_similarity([""], [""]) == 100.0
    assert edit_similarity(["ab", "cd"], ["ab", "cd"]) == pytest.approx(100.0)


def test_empty_corpus_rejected():
    for fn in (lambda: corpus_bleu([], []),
               lambda: rouge_scores([], []),
               lambda: edit_similarity([], []),
               lambda: corpus_bleu([["a"]], [["a"], ["b"]])):
        with pytest.raises(ValueError):
            fn()


# ---------------------------------------------------------------------
# permutation invariance


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(10)
    hyps, refs = random_corpus(rng, 8)
    hyps = [h or ["a"] for h in hyps]
    refs = [r or ["b"] for r in refs]
    perm = rng.permutation(8)
    h2 = [hyps[i] for i in perm]
    r2 = [refs[i] for i in perm]
    assert corpus_bleu(hyps, refs).bleu == pytest.approx(corpus_bleu(h2, r2).bleu)
    a, b = rouge_scores(hyps, refs), rouge_scores(h2, r2)
    assert (a.rouge1_f, a.rouge2_f, a.rougeL_f) == \
        pytest.approx((b.rouge1_f, b.rouge2_f, b.rougeL_f))
    sh = ["".join(h) for h in hyps]
    sr = ["".join(r) for r in refs]
    assert edit_similarity(sh, sr) == \
        pytest.approx(edit_similarity([sh[i] for i in perm], [sr[i] for i in perm]))


# ---------------------------------------------------------------------
# bucketed BLEU


def test_bucketed_bleu_partition():
    rng = np.random.default_rng(11)
    hyps, refs = random_corpus(rng, 12)
    hyps = [h or ["a"] for h in hyps]
    refs = [r or ["b"] for r in refs]
    sources = [["s"] * int(rng.integers(1, 10)) for _ in range(12)]
    buckets = bucketed_bleu(hyps, refs, sources, [4, 8])
    assert set(buckets) <= {"len[0,4)", "len[4,8)", "len[8,inf)"}
    n_by_bucket = sum(rep.total_counts[0] for rep in buckets.values())
    assert n_by_bucket == corpus_bleu(hyps, refs).total_counts[0]
    whole = bucketed_bleu(hyps, refs, sources, [])
    assert whole["len[0,inf)"].bleu == pytest.approx(corpus_bleu(hyps, refs).bleu)


def test_bucketed_bleu_absent_empty_buckets():
    sent = ["a", "b", "c", "d"]
    buckets = bucketed_bleu([sent], [sent], [["s", "s"]], [10, 20])
    assert list(buckets) == ["len[0,10)"]
    assert buckets["len[0,10)"].bleu == pytest.approx(100.0)


def test_bucketed_bleu_validates_edges():
    with pytest.raises(ValueError):
        bucketed_bleu([["a"]], [["a"]], [["s"]], [8, 4])
    with pytest.raises(ValueError):
        bucketed_bleu([["a"]], [["a"]], [["s"]], [4, 4])
    with pytest.raises(ValueError):
        bucketed_bleu([["a"]], [["a"], ["b"]], [["s"]], [4])


# ---------------------------------------------------------------------
# latency


def test_latency_ar_vs_itself_and_monotone_fields():
    model = tiny_model(seed=3)
    rng = np.random.default_rng(4)
    sources = []
    for _ in range(3):
        s = rng.integers(5, 16, size=6).astype(np.int64)
        s[-1] = 2
        sources.append(s)
    rep = measure_latency(model, model, sources, [1, 4],
                          DecodeConfig(T=1, length_beam=1, max_output_length=8))
    assert rep.ar_ms > 0
    assert set(rep.nar_ms) == {1, 4}
    for T, ms in rep.nar_ms.items():
        assert ms > 0
        assert rep.speedup[T] == pytest.approx(rep.ar_ms / ms)
    assert len(rep.raw_ar) == 3
    assert all(len(v) == 3 for v in rep.raw_nar.values())


def test_latency_validation():
    model = tiny_model(seed=3)
    cfg = DecodeConfig(T=1, length_beam=1, max_output_length=8)
    with pytest.raises(ValueError):
        measure_latency(model, model, [], [1], cfg)
    with pytest.raises(ValueError):
        measure_latency(model, model, [np.array([5, 2])], [1], cfg, warmup=1)
