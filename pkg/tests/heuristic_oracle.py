"""Brute-force reference for the deterministic aggregation rules.

Written independently of the production aggregator: exact rational
arithmetic throughout, explicit loops instead of sort keys. Used only to
cross-check severity, category, and the review flag.
"""
from fractions import Fraction
from math import floor


def oracle_heuristic(
    jury,
    confidence_threshold=0.7,
    divergence_threshold=1.5,
    min_quorum=3,
):
    """jury: list of (severity, confidence, category_label) tuples.

    Returns (severity, category_label, human_review).
    """
    if not jury:
        raise ValueError("empty jury")
    severities = [s for s, _, _ in jury]
    spread = max(severities) - min(severities)
    review = (spread > divergence_threshold) or (len(jury) < min_quorum)

    high = [(s, c) for s, c, _ in jury if c > confidence_threshold]
    if high and all(s == high[0][0] for s, _ in high):
        severity = high[0][0]
    else:
        numerator = Fraction(0)
        denominator = Fraction(0)
        for s, c, _ in jury:
            fc = Fraction(c)
            numerator += Fraction(s) * fc
            denominator += fc
        if denominator == 0:
            mean = Fraction(sum(severities), len(severities))
        else:
            mean = numerator / denominator
        base = floor(mean)
        fractional = mean - base
        severity = base if fractional <= Fraction(1, 2) else base + 1

    summed = {}
    peaks = {}
    for s, c, label in jury:
        fc = Fraction(c)
        summed[label] = summed.get(label, Fraction(0)) + fc
        peaks[label] = max(peaks.get(label, Fraction(0)), fc)
    best = None
    for label in summed:
        if best is None:
            best = label
            continue
        if summed[label] > summed[best]:
            best = label
        elif summed[label] == summed[best]:
            if peaks[label] > peaks[best]:
                best = label
            elif peaks[label] == peaks[best] and label < best:
                best = label

    return severity, best, review
