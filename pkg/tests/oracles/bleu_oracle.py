"""Standalone corpus-BLEU recomputation used to freeze test fixtures.

Deliberately independent of the package: explicit dict-based n-gram counting
and mpmath arithmetic, no imports from the library under test. Run it to
(re)print the fixture table pasted into test_bleu.py.
"""

import mpmath as mp

mp.mp.dps = 40


def ngram_counts(seq, n):
    counts = {}
    for i in range(len(seq) - n + 1):
        g = tuple(seq[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def corpus_bleu_oracle(candidates, references, max_n=4):
    assert candidates and len(candidates) == len(references)
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    for c, r in zip(candidates, references):
        for n in range(1, max_n + 1):
            cc = ngram_counts(c, n)
            rc = ngram_counts(r, n)
            totals[n] += max(len(c) - n + 1, 0)
            for g, k in cc.items():
                matches[n] += min(k, rc.get(g, 0))
    if c_len == 0:
        return mp.mpf(0)
    effective = [n for n in range(1, max_n + 1) if totals[n] > 0]
    if not effective:
        return mp.mpf(0)
    if any(matches[n] == 0 for n in effective):
        return mp.mpf(0)
    log_p = sum(mp.log(mp.mpf(matches[n]) / totals[n]) for n in effective) / len(effective)
    bp = mp.mpf(1) if c_len > r_len else mp.e ** (1 - mp.mpf(r_len) / c_len)
    return mp.e ** log_p * bp


FIXTURES = [
    # (name, candidates, references)
    ("hand_worked_example",
     [["the", "cat", "sat"]],
     [["the", "cat", "sat", "down"]]),
    ("perfect_match",
     [["a", "b", "c", "d", "e"]],
     [["a", "b", "c", "d", "e"]]),
    ("disjoint_unigrams",
     [["x", "y", "z"]],
     [["a", "b", "c"]]),
    ("single_token_match",
     [["hello"]],
     [["hello"]]),
    ("single_token_mismatch_zero",
     [["hello"]],
     [["goodbye"]]),
    ("longer_candidate_no_bp",
     [["a", "b", "c", "d", "e", "f"]],
     [["a", "b", "c", "d"]]),
    ("clipping_repeated_the",
     [["the", "the", "the", "cat", "sat", "on", "the", "mat"]],
     [["the", "cat", "sat", "on", "the", "mat"]]),
    ("partial_overlap_all_orders",
     [["i", "want", "a", "cheap", "hotel", "in", "the", "north"]],
     [["i", "want", "a", "cheap", "room", "in", "the", "north"]]),
    ("two_pair_corpus",
     [["good", "morning", "sir", "and", "welcome"],
      ["please", "wait", "a", "moment", "now"]],
     [["good", "morning", "sir", "and", "welcome"],
      ["please", "wait", "one", "moment", "now"]]),
    ("corpus_level_pools_counts",
     [["a", "b", "c"], ["c", "d", "e", "f", "g", "h"]],
     [["a", "b", "c"], ["c", "d", "e", "f", "x", "h"]]),
    ("short_candidate_heavy_bp",
     [["the", "cat"]],
     [["the", "cat", "sat", "on", "the", "mat"]]),
    ("all_orders_perfect_short_bp",
     [["to", "be", "or", "not"]],
     [["to", "be", "or", "not", "to", "be"]]),
    ("zero_fourgram_floor",
     [["please", "wait", "a", "moment"]],
     [["please", "wait", "one", "moment"]]),
    ("empty_candidate",
     [[]],
     [["a", "b"]]),
    ("mixed_empty_and_perfect",
     [[], ["a", "b", "c", "d", "e"]],
     [["x", "y"], ["a", "b", "c", "d", "e"]]),
]


if __name__ == "__main__":
    for name, cands, refs in FIXTURES:
        score = corpus_bleu_oracle(cands, refs)
        print(f'    ("{name}", {mp.nstr(score, 17)}),')
