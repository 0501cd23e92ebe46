"""Watermark-mix corpus construction.

A :class:`MixPlan` decides, for every utterance of a manifest, whether it is
kept clean or watermarked and by which roster member. Plans honour four
counting rules:

* exactly ``round_half_up(ratio * N)`` utterances are watermarked;
* the two roster groups split that set 1:1 (off by at most one);
* inside a group, members share their group's count evenly (off by at most one);
* each label class is watermarked at ``ratio`` of its own size (within one).

Plans are pure functions of (records, ratio, seed, roster) and serialise to
a line-oriented text file that replays the whole corpus.
"""
from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from operator import attrgetter
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .audio import TARGET_RATE, read_wav, resample, segmental_snr, write_wav
from .codecs import SCHEMES, CodecConfig, WatermarkPayload, capacity, embed
from .errors import ParseError, ValidationError, WmSpoofError

log = logging.getLogger(__name__)

LABELS = ("bonafide", "spoof")
PLAN_MAGIC = "WMPLAN v1"
EXTERNAL = "external"
DEFAULT_PAYLOAD_BITS = 16


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    path: str
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"{self.utt_id}: unknown label {self.label!r}")


@dataclass(frozen=True)
class RosterMember:
    """A codec in a group, or an external slot when ``config`` is None."""

    name: str
    config: Optional[CodecConfig] = None

    @property
    def is_external(self) -> bool:
        return self.config is None


@dataclass(frozen=True)
class Group:
    name: str
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValidationError(f"group {self.name!r} has no members")


@dataclass(frozen=True)
class Roster:
    groups: tuple

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) != 2:
            raise ValidationError(f"a roster needs exactly two groups, got {len(self.groups)}")
        names = [m.name for g in self.groups for m in g.members]
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        if dupes:
            raise ValidationError(f"duplicate roster member names: {', '.join(dupes)}")

    def member(self, name: str) -> RosterMember:
        for group in self.groups:
            for m in group.members:
                if m.name == name:
                    return m
        raise ValidationError(f"unknown roster member {name!r}")

    def group_of(self, name: str) -> str:
        for group in self.groups:
            if any(m.name == name for m in group.members):
                return group.name
        raise ValidationError(f"unknown roster member {name!r}")


def default_roster(key: int = 0) -> Roster:
    """Six handcrafted codecs against three DNN slots filled externally."""
    handcrafted = Group("handcrafted", [RosterMember(s, CodecConfig(s, key=key)) for s in SCHEMES])
    dnn = Group("dnn", [RosterMember(n) for n in ("wavmark", "timbre", "audioseal")])
    return Roster((handcrafted, dnn))


@dataclass(frozen=True)
class MixPlan:
    ratio: float
    seed: int
    roster: Roster
    records: tuple
    assignments: Mapping[str, Optional[str]] = field(default_factory=dict)
    nested: bool = False
    payload_bits: int = DEFAULT_PAYLOAD_BITS

    def watermarked(self) -> list[UtteranceRecord]:
        return [r for r in self.records if self.assignments[r.utt_id] is not None]

    def member_counts(self) -> Counter:
        return Counter(m for m in self.assignments.values() if m is not None)

    def group_counts(self) -> Counter:
        counts = Counter({g.name: 0 for g in self.roster.groups})
        for name, n in self.member_counts().items():
            counts[self.roster.group_of(name)] += n
        return counts


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def parse_manifest(path, format: str = "native_tsv") -> list[UtteranceRecord]:
    """Read ``native_tsv`` (utt_id, path, label) or an ``asvspoof_cm`` protocol.

    ASVspoof protocol lines carry the utterance id in column 2 and the label
    in column 5; the audio path is taken to be ``<utt_id>.wav``.
    """
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if format == "native_tsv":
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", lineno)
            utt, rel, label = (c.strip() for c in cols)
        elif format == "asvspoof_cm":
            cols = line.split()
            if len(cols) != 5:
                raise ParseError(f"expected 5 whitespace-separated columns, got {len(cols)}", lineno)
            utt, label = cols[1], cols[4]
            rel = f"{utt}.wav"
        else:
            raise ValidationError(f"unknown manifest format {format!r}")
        if label not in LABELS:
            raise ValidationError(f"line {lineno}: unknown label {label!r} for {utt}")
        records.append(UtteranceRecord(utt, rel, label))
    dupes = sorted(u for u, c in Counter(r.utt_id for r in records).items() if c > 1)
    if dupes:
        raise ValidationError(f"duplicate utt_id: {', '.join(dupes)}")
    return records


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.utt_id}\t{r.path}\t{r.label}\n")


# ---------------------------------------------------------------------------
# plan construction
# ---------------------------------------------------------------------------

def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def _ratio_fraction(ratio) -> Fraction:
    return Fraction(str(ratio))


def _class_quotas(class_sizes: Sequence[int], ratio: Fraction, total: int,
                  rng: np.random.Generator) -> list[int]:
    """Split ``total`` across classes, each within one of ``ratio * size``."""
    exact = [ratio * n for n in class_sizes]
    quotas = [math.floor(e) for e in exact]
    remainder = total - sum(quotas)
    # largest fractional part first, ties broken by a seeded draw
    jitter = rng.random(len(class_sizes))
    order = sorted(range(len(class_sizes)), key=lambda i: (-(exact[i] - quotas[i]), jitter[i]))
    for i in order[:remainder]:
        quotas[i] += 1
    return quotas


def _split_even(items: list, n_parts: int, rng: np.random.Generator) -> list[list]:
    """Split ``items`` into ``n_parts`` contiguous runs whose sizes differ by <= 1.

    The parts receiving the extra item are chosen by a seeded shuffle.
    """
    base, extra = divmod(len(items), n_parts)
    lucky = set(rng.permutation(n_parts)[:extra].tolist())
    out, pos = [], 0
    for i in range(n_parts):
        size = base + (1 if i in lucky else 0)
        out.append(items[pos:pos + size])
        pos += size
    return out


def _ratio_tag(ratio: Fraction) -> int:
    return int(round(float(ratio) * 1_000_000))


def build_mix_plan(records: Sequence[UtteranceRecord], ratio: float, seed: int,
                   roster: Optional[Roster] = None, nested: bool = False,
                   payload_bits: int = DEFAULT_PAYLOAD_BITS) -> MixPlan:
    """Assign clean or a roster member to every record.

    With ``nested`` the selection order per class depends on the seed only,
    so the watermarked set at a lower ratio is contained in the set at a
    higher one. Otherwise each ratio draws independently.
    """
    if not records:
        raise ValidationError("cannot build a plan from an empty manifest")
    p = _ratio_fraction(ratio)
    if not 0 <= p <= 1:
        raise ValidationError(f"ratio must lie in [0, 1], got {ratio}")
    roster = roster or default_roster()
    ordered = tuple(sorted(records, key=attrgetter("utt_id")))
    if len({r.utt_id for r in ordered}) != len(ordered):
        raise ValidationError("duplicate utt_id in records")

    select_rng = np.random.default_rng([seed] if nested else [seed, _ratio_tag(p)])
    assign_rng = np.random.default_rng([seed, _ratio_tag(p), 1])

    by_class = {lab: [] for lab in LABELS}
    for r in ordered:
        by_class[r.label].append(r)
    by_class = list(by_class.values())
    total = round_half_up(p * len(ordered))
    quotas = _class_quotas([len(c) for c in by_class], p, total, assign_rng)

    chosen = []
    for members, quota in zip(by_class, quotas):
        order = select_rng.permutation(len(members))
        chosen.extend([members[i] for i in order[:quota].tolist()])

    # interleave classes before splitting so both groups see both labels
    chosen = [chosen[i] for i in assign_rng.permutation(len(chosen))]
    half, odd = divmod(len(chosen), 2)
    first = half + (odd if assign_rng.random() < 0.5 else 0)
    split = (chosen[:first], chosen[first:])

    assignments = {r.utt_id: None for r in ordered}
    for group, part in zip(roster.groups, split):
        for member, run in zip(group.members, _split_even(part, len(group.members), assign_rng)):
            for r in run:
                assignments[r.utt_id] = member.name

    plan = MixPlan(float(ratio), int(seed), roster, ordered, assignments, nested, payload_bits)
    validate_plan(plan)
    return plan


def validate_plan(plan: MixPlan) -> None:
    """Raise :class:`ValidationError` unless every plan invariant holds."""
    p = _ratio_fraction(plan.ratio)
    assignments = plan.assignments
    ids = list(map(attrgetter("utt_id"), plan.records))
    if len(ids) != len(assignments) or assignments.keys() != set(ids):
        raise ValidationError("assignments do not match the record list one-to-one")
    members = Counter(assignments.values())
    members.pop(None, None)
    for name in members:
        plan.roster.member(name)

    n_wm = sum(members.values())
    expected = round_half_up(p * len(plan.records))
    if n_wm != expected:
        raise ValidationError(
            f"{n_wm} watermarked records, ratio {plan.ratio} of {len(plan.records)} requires {expected}"
        )

    groups = [sum(members[m.name] for m in g.members) for g in plan.roster.groups]
    if max(groups) - min(groups) > 1:
        raise ValidationError(f"group counts unbalanced: {groups}")

    for group in plan.roster.groups:
        counts = [members[m.name] for m in group.members]
        if max(counts) - min(counts) > 1:
            raise ValidationError(f"member counts in group {group.name!r} unbalanced: {counts}")

    # (label, member or None) -> count
    pairs = Counter(zip(map(attrgetter("label"), plan.records), map(assignments.__getitem__, ids)))
    sizes, marked = Counter(), Counter()
    for (label, member), n in pairs.items():
        sizes[label] += n
        if member is not None:
            marked[label] += n
    for label in LABELS:
        if abs(marked[label] - p * sizes[label]) > 1:
            raise ValidationError(
                f"class {label}: {marked[label]} of {sizes[label]} watermarked, ratio {plan.ratio}"
            )


# ---------------------------------------------------------------------------
# plan files
# ---------------------------------------------------------------------------

def serialize_plan(plan: MixPlan, path) -> None:
    lines = [
        PLAN_MAGIC,
        f"ratio\t{plan.ratio!r}",
        f"seed\t{plan.seed}",
        f"nested\t{int(plan.nested)}",
        f"payload_bits\t{plan.payload_bits}",
    ]
    for group in plan.roster.groups:
        for m in group.members:
            spec = EXTERNAL if m.is_external else m.config.to_text()
            lines.append(f"member\t{group.name}\t{m.name}\t{spec}")
    lines.append(f"records\t{len(plan.records)}")
    for r in plan.records:
        lines.append(f"{r.utt_id}\t{r.path}\t{r.label}\t{plan.assignments[r.utt_id] or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_roster_lines(entries: list[tuple[int, list[str]]]) -> Roster:
    groups: dict[str, list[RosterMember]] = {}
    for lineno, cols in entries:
        if len(cols) != 4:
            raise ParseError("member lines need 4 tab-separated fields", lineno)
        _, group, name, spec = cols
        try:
            config = None if spec == EXTERNAL else CodecConfig.from_text(spec)
        except WmSpoofError as exc:
            raise ParseError(str(exc), lineno) from None
        groups.setdefault(group, []).append(RosterMember(name, config))
    return Roster(tuple(Group(g, ms) for g, ms in groups.items()))


def load_roster(path) -> Roster:
    """Read a roster file made of ``member<TAB>group<TAB>name<TAB>config`` lines."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip() and not line.startswith("#"):
            entries.append((lineno, line.split("\t")))
    return _parse_roster_lines(entries)


def load_plan(path) -> MixPlan:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != PLAN_MAGIC:
        found = lines[0].strip() if lines else "<empty file>"
        raise ParseError(f"expected header {PLAN_MAGIC!r}, found {found!r}", 1)
    header: dict[str, str] = {}
    members: list[tuple[int, list[str]]] = []
    i = 1
    while i < len(lines):
        lineno = i + 1
        cols = lines[i].split("\t")
        key = cols[0]
        if key == "member":
            members.append((lineno, cols))
        elif key in ("ratio", "seed", "nested", "payload_bits"):
            if len(cols) != 2:
                raise ParseError(f"malformed {key} line", lineno)
            header[key] = cols[1]
        elif key == "records":
            if len(cols) != 2 or not cols[1].isdigit():
                raise ParseError("malformed records line", lineno)
            header[key] = cols[1]
            i += 1
            break
        else:
            raise ParseError(f"unexpected header line {lines[i]!r}", lineno)
        i += 1
    else:
        raise ParseError("missing 'records' section", len(lines))
    try:
        ratio = float(header["ratio"])
        seed = int(header["seed"])
        nested = bool(int(header.get("nested", "0")))
        payload_bits = int(header.get("payload_bits", str(DEFAULT_PAYLOAD_BITS)))
    except KeyError as exc:
        raise ParseError(f"missing header field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}") from None

    roster = _parse_roster_lines(members)
    records, assignments = [], {}
    for j in range(i, len(lines)):
        if not lines[j].strip():
            continue
        cols = lines[j].split("\t")
        if len(cols) != 4:
            raise ParseError("assignment lines need 4 tab-separated fields", j + 1)
        utt, rel, label, member = cols
        try:
            records.append(UtteranceRecord(utt, rel, label))
        except ValidationError as exc:
            raise ParseError(str(exc), j + 1) from None
        if utt in assignments:
            raise ParseError(f"duplicate utt_id {utt!r}", j + 1)
        assignments[utt] = None if member == "-" else member
    if len(records) != int(header["records"]):
        raise ParseError(f"records line announces {header['records']} entries, found {len(records)}")
    plan = MixPlan(ratio, seed, roster, tuple(records), assignments, nested, payload_bits)
    validate_plan(plan)
    return plan


# ---------------------------------------------------------------------------
# materialisation
# ---------------------------------------------------------------------------

@dataclass
class RecordOutcome:
    utt_id: str
    member: str
    status: str
    snr_db: float = float("nan")
    bits: int = 0
    detail: str = ""


@dataclass
class MaterializationReport:
    outcomes: list

    def counts(self) -> Counter:
        return Counter(o.member for o in self.outcomes if o.status == "ok")

    def failures(self) -> list:
        return [o for o in self.outcomes if o.status != "ok"]

    def mean_snr(self) -> float:
        vals = [o.snr_db for o in self.outcomes if o.status == "ok" and not math.isnan(o.snr_db)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_tsv(self) -> str:
        rows = ["utt_id\tmember\tstatus\tsnr_db\tbits\tdetail"]
        for o in self.outcomes:
            snr = "nan" if math.isnan(o.snr_db) else f"{o.snr_db:.4f}"
            rows.append(f"{o.utt_id}\t{o.member}\t{o.status}\t{snr}\t{o.bits}\t{o.detail}")
        rows.append("")
        rows.append("member\tcount")
        for member, n in sorted(self.counts().items()):
            rows.append(f"{member}\t{n}")
        rows.append(f"failures\t{len(self.failures())}")
        snr = self.mean_snr()
        rows.append(f"mean_segmental_snr_db\t{'nan' if math.isnan(snr) else f'{snr:.4f}'}")
        return "\n".join(rows) + "\n"


def payload_for(plan: MixPlan, utt_id: str, n_bits: int) -> WatermarkPayload:
    digest = hashlib.sha256(f"{plan.seed}\x00{utt_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return WatermarkPayload.random(n_bits, rng)


def _materialize_one(plan: MixPlan, record: UtteranceRecord, audio_root: Path, out_root: Path,
                     external_roots: Mapping[str, Path], rate: int) -> RecordOutcome:
    name = plan.assignments[record.utt_id]
    label = name or "clean"
    member = plan.roster.member(name) if name else None
    if member is not None and member.is_external:
        if name not in external_roots:
            return RecordOutcome(record.utt_id, label, "failed", detail="no directory for external slot")
        source = Path(external_roots[name]) / record.path
    else:
        source = audio_root / record.path
    target = out_root / record.path
    try:
        audio = resample(read_wav(source), rate)
    except FileNotFoundError:
        return RecordOutcome(record.utt_id, label, "failed", detail=f"missing audio {source}")
    except WmSpoofError as exc:
        return RecordOutcome(record.utt_id, label, "failed", detail=str(exc))

    outcome = RecordOutcome(record.utt_id, label, "ok")
    if member is not None and not member.is_external:
        n_bits = min(plan.payload_bits, capacity(audio, member.config))
        if n_bits < 1:
            return RecordOutcome(record.utt_id, label, "failed", detail="codec capacity is zero")
        try:
            marked = embed(audio, payload_for(plan, record.utt_id, n_bits), member.config)
        except WmSpoofError as exc:
            return RecordOutcome(record.utt_id, label, "failed", detail=str(exc))
        try:
            outcome.snr_db = segmental_snr(audio, marked)
        except WmSpoofError:
            pass
        outcome.bits = n_bits
        audio = marked
    target.parent.mkdir(parents=True, exist_ok=True)
    write_wav(audio, target)
    return outcome


def materialize(plan: MixPlan, audio_root, out_root,
                external_roots: Optional[Mapping[str, Path]] = None,
                jobs: int = 1, rate: int = TARGET_RATE) -> MaterializationReport:
    """Render the plan to ``out_root``, mirroring the manifest paths.

    Clean records pass through the same read/resample/write chain as the
    watermarked ones. Per-record failures are reported, not raised.
    """
    audio_root, out_root = Path(audio_root), Path(out_root)
    external_roots = {k: Path(v) for k, v in (external_roots or {}).items()}
    out_root.mkdir(parents=True, exist_ok=True)

    def work(record):
        return _materialize_one(plan, record, audio_root, out_root, external_roots, rate)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, plan.records))
    else:
        outcomes = [work(r) for r in plan.records]
    for o in outcomes:
        if o.status != "ok":
            log.warning("%s: %s", o.utt_id, o.detail)
    return MaterializationReport(outcomes)
