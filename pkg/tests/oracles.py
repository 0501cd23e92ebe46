"""Independent reference implementations used by the tests."""
from collections import Counter
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction


def eer_midpoint_oracle(bona, spoof):
    """Brute-force EER (as a Fraction of 1) over midpoint thresholds.

    Thresholds: below the minimum, every midpoint between consecutive
    distinct scores, and above the maximum. FAR counts spoof >= t, FRR
    counts bonafide < t. The smallest |FAR - FRR| wins; tied candidates are
    averaged.
    """
    bona = [Fraction(s) for s in bona]
    spoof = [Fraction(s) for s in spoof]
    distinct = sorted(set(bona) | set(spoof))
    cuts = [distinct[0] - 1]
    cuts += [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
    cuts.append(distinct[-1] + 1)
    points = []
    for t in cuts:
        far = Fraction(sum(s >= t for s in spoof), len(spoof))
        frr = Fraction(sum(s < t for s in bona), len(bona))
        points.append((abs(far - frr), (far + frr) / 2))
    best = min(p[0] for p in points)
    vals = [v for d, v in points if d == best]
    return sum(vals) / len(vals)


def half_up(n, ratio):
    """round_half_up(ratio * n) via Decimal, independent of the library."""
    value = Decimal(str(ratio)) * n
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def plan_violations(plan, ratio):
    """Names of the count invariants that ``plan`` breaks."""
    bad = []
    ids = [r.utt_id for r in plan.records]
    marked = {u for u, m in plan.assignments.items() if m is not None}
    if len(marked) != half_up(len(ids), ratio):
        bad.append("count")
    per_member = Counter(m for m in plan.assignments.values() if m is not None)
    per_group = [sum(per_member[m.name] for m in g.members) for g in plan.roster.groups]
    if max(per_group) - min(per_group) > 1:
        bad.append("groups")
    for g in plan.roster.groups:
        counts = [per_member[m.name] for m in g.members]
        if max(counts) - min(counts) > 1:
            bad.append(f"members:{g.name}")
    p = Fraction(str(ratio))
    for label in ("bonafide", "spoof"):
        cls = [r.utt_id for r in plan.records if r.label == label]
        k = sum(u in marked for u in cls)
        if abs(k - p * len(cls)) > 1:
            bad.append(f"class:{label}")
    return bad
