"""Corpus-level BLEU-4 on pre-tokenized text, no smoothing."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence, Union

Text = Union[str, Sequence]


def _tokens(x: Text) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Text], references: Sequence[Text], max_n: int = 4) -> float:
    """BLEU in [0, 100] with one reference per hypothesis.

    Clipped n-gram matches and totals are summed over the corpus before taking
    precisions; any zero precision gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("need exactly one reference per hypothesis")
    if not references:
        raise ValueError("empty reference set")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        if not r:
            raise ValueError("empty reference")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = math.fsum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)
