"""EER computation, relative degradation and ratio tables.

Scores follow one polarity throughout: higher means more bonafide.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import LABELS, parse_manifest
from .errors import (
    InvalidInputError,
    ParseError,
    UndefinedMetricError,
    ValidationError,
)

RATIOS = (0.75, 0.50, 0.25, 0.0)


@dataclass(frozen=True)
class Trial:
    utt_id: str
    score: float
    label: str


@dataclass(frozen=True, eq=False)
class ScoreSet:
    trials: tuple

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        for t in self.trials:
            if t.label not in LABELS:
                raise ValidationError(f"{t.utt_id}: unknown label {t.label!r}")
            if not math.isfinite(t.score):
                raise ValidationError(f"{t.utt_id}: non-finite score")

    @classmethod
    def from_arrays(cls, scores, labels, utt_ids=None) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        if utt_ids is None:
            utt_ids = [f"t{i}" for i in range(len(scores))]
        return cls(tuple(Trial(u, float(s), lab) for u, s, lab in zip(utt_ids, scores, labels)))

    def scores(self, label: str) -> np.ndarray:
        return np.array([t.score for t in self.trials if t.label == label], dtype=np.float64)

    def __eq__(self, other):
        return isinstance(other, ScoreSet) and self.trials == other.trials

    def __len__(self):
        return len(self.trials)


@dataclass(frozen=True)
class EerResult:
    eer: float  # percent
    threshold: float


def round2(value: float) -> float:
    """Round half-up to two decimals, as printed in the tables."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------

def _read_label_sidecar(path) -> dict[str, str]:
    """Labels from a 2-column (utt label), native or ASVspoof manifest."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        return {}
    width = len(lines[0].split())
    if width == 5:
        records = parse_manifest(path, "asvspoof_cm")
    elif width == 3 and "\t" in lines[0]:
        records = parse_manifest(path, "native_tsv")
    elif width == 2:
        labels = {}
        for lineno, line in enumerate(lines, 1):
            utt, label = line.split()
            if label not in LABELS:
                raise ValidationError(f"line {lineno}: unknown label {label!r}")
            if utt in labels:
                raise ValidationError(f"duplicate utt_id {utt!r} in sidecar")
            labels[utt] = label
        return labels
    else:
        raise ParseError(f"cannot recognise label sidecar with {width} columns", 1)
    return {r.utt_id: r.label for r in records}


def parse_scores(path, labels_path=None) -> ScoreSet:
    """Read ``utt_id score [label]`` lines, joining labels from a sidecar if needed."""
    sidecar = _read_label_sidecar(labels_path) if labels_path is not None else None
    trials, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split()
        if len(cols) not in (2, 3):
            raise ParseError(f"expected 2 or 3 columns, got {len(cols)}", lineno)
        utt = cols[0]
        try:
            score = float(cols[1])
        except ValueError:
            raise ParseError(f"non-numeric score {cols[1]!r}", lineno) from None
        if not math.isfinite(score):
            raise ParseError(f"non-finite score {cols[1]!r}", lineno)
        if len(cols) == 3:
            label = cols[2]
        elif sidecar is None:
            raise ParseError("two-column score line needs a label sidecar", lineno)
        elif utt not in sidecar:
            raise ValidationError(f"utt_id {utt!r} has no label in the sidecar")
        else:
            label = sidecar[utt]
        if label not in LABELS:
            raise ParseError(f"unknown label {label!r}", lineno)
        if utt in seen:
            raise ValidationError(f"duplicate utt_id {utt!r} in score file")
        seen.add(utt)
        trials.append(Trial(utt, score, label))
    if sidecar is not None:
        missing = sorted(set(sidecar) - seen)
        if missing:
            raise ValidationError(f"{len(missing)} labelled utt_id(s) have no score, e.g. {missing[0]!r}")
    return ScoreSet(tuple(trials))


def write_scores(scores: ScoreSet, path) -> None:
    with open(path, "w") as fh:
        for t in scores.trials:
            fh.write(f"{t.utt_id} {t.score!r} {t.label}\n")


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def far_frr(scores: ScoreSet):
    """Counts behind the FAR/FRR step curves.

    Returns ``(thresholds, spoof_accepted, bonafide_rejected, n_spoof, n_bona)``
    where the thresholds are every distinct score plus one beyond the maximum.
    FAR(t) counts spoof scores >= t, FRR(t) counts bonafide scores < t.
    """
    bona = np.sort(scores.scores("bonafide"))
    spoof = np.sort(scores.scores("spoof"))
    if len(bona) == 0 or len(spoof) == 0:
        raise InvalidInputError("EER needs at least one bonafide and one spoof trial")
    distinct = np.unique(np.concatenate([bona, spoof]))
    above = distinct[-1] + max(1.0, abs(distinct[-1]))
    thresholds = np.append(distinct, above)
    accepted = len(spoof) - np.searchsorted(spoof, thresholds, side="left")
    rejected = np.searchsorted(bona, thresholds, side="left")
    return thresholds, accepted, rejected, len(spoof), len(bona)


def compute_eer(scores: ScoreSet) -> EerResult:
    """Equal error rate, in percent, where the FAR and FRR steps cross.

    FAR - FRR falls strictly as the threshold rises, so the smallest
    |FAR - FRR| is reached at one threshold or at two neighbours with
    opposite signs. One threshold gives EER = (FAR + FRR) / 2 there; a tie
    averages the two candidates, which keeps the result symmetric under
    swapping labels. The reported threshold is the smaller candidate.
    Exact integer arithmetic decides the comparisons.
    """
    thresholds, acc, rej, n_spoof, n_bona = far_frr(scores)
    # FAR - FRR scaled by n_spoof * n_bona, exact in integers
    gap = np.abs(acc.astype(np.int64) * n_bona - rej.astype(np.int64) * n_spoof)
    best = gap.min()
    hits = np.flatnonzero(gap == best)
    total = Fraction(0)
    for i in hits:
        total += Fraction(int(acc[i]), n_spoof) + Fraction(int(rej[i]), n_bona)
    eer = total / (2 * len(hits))
    return EerResult(float(eer * 100), float(thresholds[hits[0]]))


def relative_degradation(eer_p: float, eer_0: float) -> float:
    """Percentage increase of ``eer_p`` over the clean ``eer_0``, two decimals."""
    if eer_0 == 0:
        raise UndefinedMetricError("relative degradation is undefined for a zero clean EER")
    if eer_0 < 0 or not (math.isfinite(eer_p) and math.isfinite(eer_0)):
        raise InvalidInputError("EER values must be finite and non-negative")
    return round2(100.0 * (eer_p - eer_0) / eer_0)


# ---------------------------------------------------------------------------
# ratio tables
# ---------------------------------------------------------------------------

Cell = Union[EerResult, float]


def _pct(value: Cell) -> float:
    return value.eer if isinstance(value, EerResult) else float(value)


def _ratio_label(ratio: float) -> str:
    return f"{round(ratio * 100):d}%"


@dataclass
class RatioTable:
    """EER cells by row (dataset or model) and watermark ratio."""

    row_header: str
    rows: list
    ratios: list
    cells: dict  # (row, ratio) -> percent, rounded to 2 decimals
    delta: Optional[dict] = None  # row -> percent

    def header(self) -> list[str]:
        cols = [self.row_header] + [_ratio_label(r) for r in self.ratios]
        if self.delta is not None:
            cols.append(f"{_ratio_label(self.ratios[0])} delta(%)")
        return cols

    def body(self) -> list[list[str]]:
        out = []
        for row in self.rows:
            line = [row] + [
                f"{self.cells[(row, r)]:.2f}" if (row, r) in self.cells else "" for r in self.ratios
            ]
            if self.delta is not None:
                line.append(f"{self.delta[row]:.2f}")
            out.append(line)
        return out

    def to_text(self) -> str:
        grid = [self.header()] + self.body()
        widths = [max(len(r[i]) for r in grid) for i in range(len(grid[0]))]
        lines = []
        for k, r in enumerate(grid):
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if k == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.body())
        return buf.getvalue()


def emit_ratio_table(results: Mapping[tuple, Cell], with_delta: bool = True,
                     row_header: str = "dataset",
                     ratios: Optional[Sequence[float]] = None) -> RatioTable:
    """Lay ``(row, ratio) -> EER`` cells out as rows x descending ratios.

    The delta column compares the highest ratio with the 0% column.
    """
    if not results:
        raise ValidationError("no table cells given")
    rows = list(dict.fromkeys(row for row, _ in results))
    present = {float(r) for _, r in results}
    for r in present:
        if not any(math.isclose(r, allowed) for allowed in RATIOS):
            raise ValidationError(f"ratio {r} is not one of 75%, 50%, 25%, 0%")
    ratios = sorted(present if ratios is None else set(map(float, ratios)), reverse=True)
    cells = {(row, float(r)): round2(_pct(v)) for (row, r), v in results.items()}

    delta = None
    if with_delta:
        if 0.0 not in ratios:
            raise ValidationError("delta column requested but there is no 0% column")
        top = ratios[0]
        delta = {}
        for row in rows:
            if (row, 0.0) not in cells or (row, top) not in cells:
                raise ValidationError(f"row {row!r} lacks the cells needed for delta")
            delta[row] = relative_degradation(_pct(results[_key(results, row, top)]),
                                              _pct(results[_key(results, row, 0.0)]))
    return RatioTable(row_header, rows, ratios, cells, delta)


def _key(results, row, ratio):
    for (r, q) in results:
        if r == row and float(q) == ratio:
            return (r, q)
    raise KeyError((row, ratio))


def parse_ratio_csv(text: str) -> dict:
    """Read back the numeric cells of :meth:`RatioTable.to_csv` output."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    out = {}
    for row in reader:
        for name, value in zip(header[1:], row[1:]):
            if value != "":
                out[(row[0], name)] = float(value)
    return out
