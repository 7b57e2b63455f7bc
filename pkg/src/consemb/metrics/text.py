"""ROUGE-1/2/L on lowercased word tokens, no stemming."""
from __future__ import annotations

import re
import warnings
from collections import Counter

from ..errors import DegenerateInputWarning, InvalidInputError

_WORD_RE = re.compile(r"\d+(?:\.\d+)?|\w+")
VARIANTS = ("r1", "r2", "rl")


def rouge_tokens(text: str) -> list[str]:
    # decimals stay whole so that "40.05" is one token
    return _WORD_RE.findall(text.lower())


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _prf(overlap, n_cand, n_ref):
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f}


def rouge(candidate: str, reference: str, variant: str = "rl") -> dict:
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown ROUGE variant {variant!r}")
    cand, ref = rouge_tokens(candidate), rouge_tokens(reference)
    if not ref:
        warnings.warn("empty reference; ROUGE scored as zero", DegenerateInputWarning, stacklevel=2)
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    if variant == "rl":
        return _prf(lcs_length(cand, ref), len(cand), len(ref))
    n = 1 if variant == "r1" else 2
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def rouge_all(candidate: str, reference: str) -> dict:
    return {v: rouge(candidate, reference, v)["f1"] for v in VARIANTS}
