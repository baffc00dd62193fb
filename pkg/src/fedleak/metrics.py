"""Leakage metrics: ROUGE-1/2/L, score aggregation, PII recovery, paired t-tests."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import normalize


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(hyp: list, ref: list, n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise MetricError(f"rouge_n requires n >= 1, got {n}")
    hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
    ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    if not hyp_grams or not ref_grams:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum((hyp_grams & ref_grams).values())
    precision = overlap / sum(hyp_grams.values())
    recall = overlap / sum(ref_grams.values())
    return RougeScore(precision, recall, _f1(precision, recall))


def lcs_length(a: list, b: list) -> int:
    """Longest-common-subsequence length.

    Bit-parallel formulation of the standard DP: the complemented DP row is
    held in a Python int, one add/or/and sweep per symbol of ``a``.
    """
    m = len(b)
    if not a or not b:
        return 0
    masks: dict = {}
    for j, sym in enumerate(b):
        masks[sym] = masks.get(sym, 0) | (1 << j)
    full = (1 << m) - 1
    row = full
    for sym in a:
        match = masks.get(sym, 0)
        keep = row & match
        row = ((row + keep) | (row & ~match)) & full
    return m - bin(row).count("1")


def rouge_l(hyp: list, ref: list) -> RougeScore:
    """LCS-based precision (vs hyp length), recall (vs ref length), and F1."""
    if not hyp or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(hyp, ref)
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return RougeScore(precision, recall, _f1(precision, recall))


def top_fraction_mean(scores: list, fraction: float) -> float:
    """Mean of the ceil(fraction * n) largest scores."""
    if not scores:
        raise MetricError("top_fraction_mean of an empty score list")
    if not 0.0 < fraction <= 1.0:
        raise MetricError(f"fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(scores))
    top = sorted(scores, reverse=True)[:k]
    return sum(top) / k


def threshold_exceedance(scores: list, threshold: float) -> float:
    """Percentage of scores strictly above the threshold."""
    if not scores:
        raise MetricError("threshold_exceedance of an empty score list")
    return 100.0 * sum(1 for s in scores if s > threshold) / len(scores)


def quantile_curve(scores: list, fractions: list) -> list[tuple[float, float]]:
    """For each fraction x, the minimum score among the top ceil(x*n) scores
    (nearest-rank, no interpolation)."""
    if not scores:
        raise MetricError("quantile_curve of an empty score list")
    ranked = sorted(scores, reverse=True)
    curve = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise MetricError(f"quantile fraction must be in (0, 1], got {fraction}")
        k = math.ceil(fraction * len(ranked))
        curve.append((fraction, ranked[k - 1]))
    return curve


def pii_recovery(samples, corpus, top_fraction: float = 0.3):
    """Count PII instances in the ground-truth segments of the top-scoring
    samples and how many reappear verbatim in the generated text.

    ``samples`` need ``rougeL``, ``generated_text`` and either
    ``best_match_id`` (zero-input: the segment is the whole matched document)
    or ``doc_id`` + ``truth_text`` (partial-input: the held-back suffix).
    Matching is case-insensitive on tokenizer-normalized strings so spacing
    introduced by decoding cannot hide a recovered span.
    """
    ranked = sorted(samples, key=lambda s: s["rougeL"], reverse=True)
    kept = ranked[: math.ceil(top_fraction * len(ranked))] if ranked else []
    total = 0
    recovered = 0
    for sample in kept:
        doc_id = sample.get("best_match_id")
        segment_text = None
        if doc_id is None:
            doc_id = sample.get("doc_id")
            segment_text = sample.get("truth_text", "")
        if doc_id is None:
            continue
        doc = corpus.by_id(int(doc_id))
        segment = normalize(segment_text) if segment_text is not None else normalize(doc.text)
        generated = normalize(sample["generated_text"])
        for span in doc.pii_spans:
            surface = normalize(span.surface)
            if surface and surface in segment:
                total += 1
                if surface in generated:
                    recovered += 1
    proportion = recovered / total if total else 0.0
    return total, recovered, proportion


# Regularized incomplete beta via Lentz's continued fraction; the two-sided
# Student-t p-value is I_{df/(df+t^2)}(df/2, 1/2).

_BETA_EPS = 1e-12
_FPMIN = 1e-300
_MAX_ITER = 500


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise MetricError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise MetricError(f"betainc_reg requires a, b > 0, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """Two-sided survival: P(|T| > |t|) for Student-t with df degrees."""
    if df < 1:
        raise MetricError(f"degrees of freedom must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: int) -> float:
    tail = student_t_sf(t, df) / 2.0
    return 1.0 - tail if t >= 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    mean_a: float
    mean_b: float
    df: int

    def to_dict(self) -> dict:
        return {
            "t_statistic": self.t_statistic,
            "p_value": self.p_value,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "df": self.df,
        }


def paired_t_test(a: list, b: list) -> TTestResult:
    """Two-sided paired t-test on differences b - a, sample sd (n-1)."""
    if len(a) != len(b):
        raise MetricError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise MetricError(f"paired_t_test needs n >= 2, got {n}")
    diffs = [bi - ai for ai, bi in zip(a, b)]
    mean_d = sum(diffs) / n
    var = sum((d - mean_d) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    df = n - 1
    if sd == 0.0:
        if mean_d == 0.0:
            t, p = 0.0, 1.0
        else:
            t, p = math.copysign(math.inf, mean_d), 0.0
    else:
        t = mean_d / (sd / math.sqrt(n))
        p = student_t_sf(t, df)
    return TTestResult(t, p, sum(a) / n, sum(b) / n, df)
