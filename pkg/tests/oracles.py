"""Independent reference implementations used to check the package."""

import math


def okapi(query, doc, corpus, k1=1.2, b=0.75):
    """Brute-force Okapi BM25 of token list ``query`` against ``doc`` in ``corpus``."""
    n = len(corpus)
    avgdl = sum(len(d) for d in corpus) / n
    total = 0.0
    for q in query:
        f = doc.count(q)
        if f == 0:
            continue
        df = sum(1 for d in corpus if q in d)
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        total += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(doc) / avgdl))
    return total


def bm25_ratio(pred, ref, corpus, k1=1.2, b=0.75):
    if not pred or not ref:
        return 0.0
    self_score = okapi(ref, ref, corpus, k1, b)
    if self_score <= 0:
        return 0.0
    return min(1.0, max(0.0, okapi(pred, ref, corpus, k1, b) / self_score))
