"""Brute-force reference values for the metric golden file.

Reads `hyp<TAB>ref` pairs (lowercase, space-separated tokens) from
metric_pairs.tsv and writes metric_golden.jsonl. Every quantity is computed
from its definition: explicit n-gram tallies, LCS by enumerating the
subsequences of the shorter side, METEOR chunks by scanning the alignment.
"""

import itertools
import json
import math
from collections import Counter
from pathlib import Path

HERE = Path(__file__).parent
SUFFIXES = [("sses", "ss"), ("ies", "y"), ("ing", ""), ("ed", ""), ("ly", ""), ("s", "")]


def ngrams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def overlap(h, r):
    return sum(min(c, r[g]) for g, c in h.items())


def bleu(h, r, max_n=4):
    if not h:
        return [0.0] * max_n
    c, rl = len(h), len(r)
    bp = math.exp(1 - rl / c) if c <= rl else 1.0
    logs, out = [], []
    for n in range(1, max_n + 1):
        if len(h) >= n:
            total = len(h) - n + 1
            m = overlap(ngrams(h, n), ngrams(r, n))
            p = 1 / (total + 1) if (m == 0 and n >= 2) else m / total
            logs.append(math.log(p) if p > 0 else -math.inf)
        s = 100 * bp * math.exp(sum(logs) / len(logs))
        out.append(s if math.isfinite(s) else 0.0)
    return out


def f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def rouge_n(h, r, n):
    hn, rn = ngrams(h, n), ngrams(r, n)
    if not hn or not rn:
        return 0.0
    o = overlap(hn, rn)
    return 100 * f1(o / sum(hn.values()), o / sum(rn.values()))


def is_subseq(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_brute(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            if is_subseq([short[i] for i in idx], long_):
                return k
    return 0


def rouge_l(h, r):
    if not h or not r:
        return 0.0
    l = lcs_brute(h, r)
    return 100 * f1(l / len(h), l / len(r))


def stem(w):
    for suf, rep in SUFFIXES:
        if w.endswith(suf):
            base = w[: len(w) - len(suf)]
            if suf == "s" and base.endswith("s"):
                continue
            if len(base + rep) >= 3:
                return base + rep
    return w


def meteor(h, r):
    hu, ru, pairs = [False] * len(h), [False] * len(r), []
    for key in (lambda w: w, stem):
        for i, w in enumerate(h):
            if hu[i]:
                continue
            for j, v in enumerate(r):
                if not ru[j] and key(v) == key(w):
                    hu[i] = ru[j] = True
                    pairs.append((i, j))
                    break
    m = len(pairs)
    if m == 0:
        return 0.0
    pairs.sort()
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, rc = m / len(h), m / len(r)
    fmean = 10 * p * rc / (rc + 9 * p)
    return 100 * fmean * (1 - 0.5 * (chunks / m) ** 3)


def jaccard(h, r):
    a, b = set(h), set(r)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def main():
    rows = []
    for line in (HERE / "metric_pairs.tsv").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        hyp, ref = line.split("\t")
        h, r = hyp.split(), ref.split()
        b = bleu(h, r)
        rows.append(
            {
                "hyp": hyp,
                "ref": ref,
                "lcs": lcs_brute(h, r) if h else 0,
                "b1": b[0],
                "b2": b[1],
                "b3": b[2],
                "b4": b[3],
                "bleu": b[3],
                "r1": rouge_n(h, r, 1),
                "r2": rouge_n(h, r, 2),
                "rl": rouge_l(h, r),
                "meteor": meteor(h, r),
                "jaccard": jaccard(h, r),
            }
        )
    with open(HERE / "metric_golden.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    print(f"{len(rows)} pairs")


if __name__ == "__main__":
    main()
