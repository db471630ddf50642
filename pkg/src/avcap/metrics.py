"""Corpus captioning metrics over candidate / multi-reference pairs.

Variant choices (also recorded in every report's notes): corpus-level BLEU
with clipped n-gram precisions up to order 4 and no smoothing unless the
add-one flag is set; ROUGE-L as an F-measure over the longest common
subsequence with beta = 1.2, best reference taken; METEOR restricted to
exact and stem matching stages (plus an optional user-supplied synonym
table), alignment chosen to minimize chunk count; CIDEr-D with count
clipping, Gaussian length penalty (sigma 6) and clip-once document
frequencies; SPIDEr as the arithmetic mean of CIDEr-D and externally
supplied SPICE values.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .stemmer import stem
from .textproc import tokenize


@dataclass
class EvalPair:
    clip_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"{self.clip_id}: needs at least one reference")


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------- BLEU


def modified_precision(pairs: list[EvalPair], n: int) -> tuple[int, int]:
    """Corpus-level clipped n-gram matches and candidate n-gram total."""
    num = den = 0
    for pair in pairs:
        cand = ngram_counts(pair.candidate, n)
        max_ref = Counter()
        for ref in pair.references:
            for gram, count in ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], count)
        num += sum(min(count, max_ref[gram]) for gram, count in cand.items())
        den += max(len(pair.candidate) - n + 1, 0)
    return num, den


def _closest_ref_length(pair: EvalPair) -> int:
    c = len(pair.candidate)
    return min((abs(len(r) - c), len(r)) for r in pair.references)[1]


def bleu4(pairs: list[EvalPair], smoothing: bool = False) -> float:
    """Geometric mean of clipped precisions n=1..4 times the brevity penalty.

    Add-one smoothing (applied for n >= 2) keeps tiny corpora with no
    4-gram overlap away from hard zero.
    """
    if not pairs:
        raise ValueError("bleu4 needs at least one pair")
    c = sum(len(p.candidate) for p in pairs)
    if c == 0:
        warnings.warn("empty candidate corpus, BLEU-4 = 0")
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        num, den = modified_precision(pairs, n)
        if smoothing and n >= 2:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += 0.25 * math.log(num / den)
    r = sum(_closest_ref_length(p) for p in pairs)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


# ----------------------------------------------------------------- ROUGE-L


def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(pair: EvalPair, beta: float = 1.2) -> float:
    """Best-reference LCS F-measure: F = (1 + b^2) P R / (R + b^2 P)."""
    if not pair.candidate:
        return 0.0
    best = 0.0
    for ref in pair.references:
        ell = lcs_length(pair.candidate, ref)
        if ell == 0 or not ref:
            continue
        p = ell / len(pair.candidate)
        r = ell / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


# ------------------------------------------------------------------ METEOR


def load_synonyms(path) -> dict[str, int]:
    """One synonym group per line, whitespace separated."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for gid, line in enumerate(fh):
            for tok in line.split():
                table[tok] = gid
    return table


def _match_stages(cand, ref, synonyms):
    """Greedy staged matching: exact, then stem, then synonym group.

    Returns a list of (cand_index, allowed ref_index set) with each token
    matched at most once; the per-key match counts are maximal per stage.
    """
    c_free = set(range(len(cand)))
    r_free = set(range(len(ref)))
    links = []

    def run_stage(key_fn):
        c_by_key, r_by_key = {}, {}
        for i in sorted(c_free):
            c_by_key.setdefault(key_fn(cand[i]), []).append(i)
        for j in sorted(r_free):
            r_by_key.setdefault(key_fn(ref[j]), []).append(j)
        for key, c_idx in sorted(c_by_key.items()):
            r_idx = r_by_key.get(key)
            if not r_idx:
                continue
            k = min(len(c_idx), len(r_idx))
            # which occurrences pair up is settled by the chunk minimizer;
            # here we fix the matched multiset only
            for i in c_idx[:k]:
                links.append((i, tuple(r_idx)))
                c_free.discard(i)
            for j in r_idx[:k]:
                r_free.discard(j)

    run_stage(lambda t: ("exact", t))
    run_stage(lambda t: ("stem", stem(t)))
    if synonyms:
        run_stage(lambda t: ("syn", synonyms.get(t, f"\0{t}")))
    return links


def _min_chunks(links, used_budget=200_000) -> int:
    """Minimum chunk count over injective alignments consistent with links."""
    links = sorted(links)
    m = len(links)
    best = [m + 1]
    nodes = [0]

    def dfs(idx, used, prev_c, prev_r, chunks):
        if chunks >= best[0]:
            return
        if idx == m:
            best[0] = min(best[0], chunks)
            return
        nodes[0] += 1
        if nodes[0] > used_budget:
            best[0] = min(best[0], chunks + 1)
            return
        c_i, candidates = links[idx]
        ordered = sorted(candidates,
                         key=lambda j: (0 if (prev_c == c_i - 1 and j == prev_r + 1) else 1, j))
        for j in ordered:
            if j in used:
                continue
            extend = prev_c == c_i - 1 and j == prev_r + 1
            dfs(idx + 1, used | {j}, c_i, j, chunks + (0 if extend else 1))

    dfs(0, frozenset(), -10, -10, 0)
    return best[0]


def meteor_pair(pair: EvalPair, synonyms: dict | None = None) -> float:
    """Unigram-matching F-mean with a fragmentation penalty, best reference.

    score = Fmean (1 - 0.5 (chunks / m)^3), Fmean = 10 P R / (R + 9 P).
    """
    if not pair.candidate:
        return 0.0
    best = 0.0
    for ref in pair.references:
        links = _match_stages(pair.candidate, ref, synonyms)
        m = len(links)
        if m == 0 or not ref:
            continue
        chunks = _min_chunks(links)
        p = m / len(pair.candidate)
        r = m / len(ref)
        fmean = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, fmean * (1.0 - penalty))
    return best


# ----------------------------------------------------------------- CIDEr-D


def cider_d(pairs: list[EvalPair], n_max: int = 4, sigma: float = 6.0):
    """Clipped TF-IDF n-gram cosine with a Gaussian length penalty, x10.

    Document frequencies count each clip once however many of its
    references contain the n-gram; idf = log(N / max(1, df)). Returns
    (corpus mean, per-pair scores).
    """
    n_clips = len(pairs)
    if n_clips < 2:
        raise ValueError("cider_d needs at least 2 clips for document frequencies")
    df = [Counter() for _ in range(n_max + 1)]
    for pair in pairs:
        seen = [set() for _ in range(n_max + 1)]
        for ref in pair.references:
            for n in range(1, n_max + 1):
                seen[n].update(ngram_counts(ref, n))
        for n in range(1, n_max + 1):
            for gram in seen[n]:
                df[n][gram] += 1
    log_n = math.log(n_clips)

    def vec(tokens, n):
        counts = ngram_counts(tokens, n)
        return {g: c * (log_n - math.log(max(1.0, df[n][g])))
                for g, c in counts.items()}

    def norm(v):
        return math.sqrt(sum(x * x for x in v.values()))

    per_pair = []
    for pair in pairs:
        score_n = np.zeros(n_max)
        for n in range(1, n_max + 1):
            cv = vec(pair.candidate, n)
            cn = norm(cv)
            acc = 0.0
            for ref in pair.references:
                rv = vec(ref, n)
                rn = norm(rv)
                if cn == 0.0 or rn == 0.0:
                    continue
                sim = sum(min(cv.get(g, 0.0), rv[g]) * rv[g] for g in rv)
                delta = len(pair.candidate) - len(ref)
                acc += (sim / (cn * rn)) * math.exp(-delta ** 2 / (2 * sigma ** 2))
            score_n[n - 1] = acc / len(pair.references)
        per_pair.append(10.0 * float(score_n.mean()))
    return float(np.mean(per_pair)), per_pair


def spider(cider_value: float, spice_value: float) -> float:
    return 0.5 * (cider_value + spice_value)


# ------------------------------------------------------------------ report


VARIANT_NOTES = {
    "bleu": "corpus-level, clipped n-gram precision n<=4, brevity penalty, "
            "closest reference length (ties -> shorter)",
    "rouge_l": "LCS F-measure, beta=1.2, best reference",
    "meteor": "exact+stem stages (synonym stage only with a user table), "
              "Fmean=10PR/(R+9P), penalty=0.5(chunks/m)^3",
    "cider": "CIDEr-D: count clipping, Gaussian length penalty sigma=6, "
             "clip-once document frequency, idf=log(N/max(1,df))",
    "spider": "mean of CIDEr-D and externally supplied SPICE",
}


@dataclass
class MetricReport:
    corpus: dict[str, float]
    per_sample: dict[str, dict[str, float]]
    notes: dict[str, str] = field(default_factory=lambda: dict(VARIANT_NOTES))

    def to_json(self) -> str:
        return json.dumps(
            {"corpus": self.corpus, "per_sample": self.per_sample, "notes": self.notes},
            indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(obj["corpus"], obj["per_sample"], obj.get("notes", {}))


TABLE_COLUMNS = ("bleu4", "meteor", "rouge_l", "cider_d", "spice", "spider")
TABLE_HEADERS = ("BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "SPICE", "SPIDEr")


def report_csv(report: MetricReport) -> str:
    """Single-row CSV in the published column order, percent units."""
    cells = []
    for key in TABLE_COLUMNS:
        v = report.corpus.get(key)
        cells.append("" if v is None else f"{100.0 * v:.2f}")
    return ",".join(TABLE_HEADERS) + "\n" + ",".join(cells) + "\n"


def load_spice(path) -> dict[str, float]:
    """JSON-lines {clip_id, spice} with per-sample scores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["clip_id"]] = float(rec["spice"])
    return out


def evaluate_corpus(candidates: dict[str, str], references: dict[str, list[str]],
                    bleu_smoothing: bool = False, synonyms: dict | None = None,
                    spice: dict[str, float] | None = None) -> MetricReport:
    """Score a full candidate set against multi-reference captions.

    candidates and references map clip_id to raw caption strings; both are
    tokenized with the shared caption tokenizer. Every reference clip must
    have a candidate.
    """
    pairs = []
    for clip_id in sorted(references):
        if clip_id not in candidates:
            raise ValueError(f"missing candidate for clip {clip_id}")
        pairs.append(EvalPair(clip_id, tokenize(candidates[clip_id]),
                              [tokenize(r) for r in references[clip_id]]))
    corpus_cider, per_cider = cider_d(pairs)
    per_sample = {}
    for pair, cval in zip(pairs, per_cider):
        per_sample[pair.clip_id] = {
            "meteor": meteor_pair(pair, synonyms),
            "rouge_l": rouge_l_pair(pair),
            "cider_d": cval,
        }
    corpus = {
        "bleu4": bleu4(pairs, smoothing=bleu_smoothing),
        "meteor": float(np.mean([s["meteor"] for s in per_sample.values()])),
        "rouge_l": float(np.mean([s["rouge_l"] for s in per_sample.values()])),
        "cider_d": corpus_cider,
    }
    notes = dict(VARIANT_NOTES)
    notes["bleu_smoothing"] = "add-one (n>=2)" if bleu_smoothing else "none"
    if spice is not None:
        missing = [c for c in references if c not in spice]
        if missing:
            raise ValueError(f"spice values missing for clips {missing[:3]}")
        for clip_id in per_sample:
            per_sample[clip_id]["spice"] = spice[clip_id]
            per_sample[clip_id]["spider"] = spider(per_sample[clip_id]["cider_d"],
                                                   spice[clip_id])
        corpus["spice"] = float(np.mean([spice[c] for c in references]))
        corpus["spider"] = spider(corpus["cider_d"], corpus["spice"])
    return MetricReport(corpus, per_sample, notes)
